use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

use lowmach::compressible_solver::{
    self as solver, admissibility_check, weak_residual, weak_test_basis, InitRecipe, SimConfig,
};
use lowmach::error::Error;
use lowmach::jensen::{
    self, envelope_upper_laminate_sweep, envelope_upper_planewave_sweep, EnvelopeEstimate, JensenBudgets,
    PlaneWaveOptions, SearchOptions,
};
use lowmach::limit_driver::{self, AnalysisOptions, MachLadder};
use lowmach::relaxed_operator::{diatomic_det, wave_cone_membership, OperatorAE, WaveConeOptions};
use lowmach::snapshot::{self, EnergySidecar};
use lowmach::state_space::{lift_s, AugmentedState, Params, RelaxedState};
use lowmach::young_measure::{Atom, AtomicMeasure, SpacetimeGrid, TestFunction, YoungMeasure};

use crate::{canonical, Cli, Command};

pub const REPORT_SCHEMA: &str = "lowmach.report/1";

pub fn version_text() -> String {
    format!(
        "lowmach {}\nsnapshot format {}\nyoung measure schema {}\nreport schema {}\n",
        env!("CARGO_PKG_VERSION"),
        snapshot::VERSION,
        lowmach::young_measure::YOUNG_MEASURE_SCHEMA,
        REPORT_SCHEMA
    )
}

pub enum Outcome {
    Ok,
    CheckFailed(String),
}

#[derive(Debug, Serialize)]
pub struct CliError {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
    message: String,
    #[serde(skip)]
    code: u8,
}

impl CliError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            kind: "validation",
            field: Some(field.into()),
            message: message.into(),
            code: 2,
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        CliError {
            kind: "check_failed",
            field: None,
            message: message.into(),
            code: 4,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            kind: "io",
            field: Some(path.display().to_string()),
            message: e.to_string(),
            code: 2,
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&json!({ "error": self })).unwrap_or_else(|_| self.message.clone())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let numerical = e.is_numerical();
        let field = match &e {
            Error::InvalidParameter { field, .. } => Some(field.clone()),
            _ => None,
        };
        CliError {
            kind: if numerical { "numerical" } else { "validation" },
            field,
            message: e.to_string(),
            code: if numerical { 3 } else { 2 },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let located = |path: String, message: String| {
        CliError::validation(if path.is_empty() || path == "." { "config".into() } else { path }, message)
    };
    if is_json {
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| located(e.path().to_string(), e.inner().to_string()))
    } else {
        let de = toml::Deserializer::new(&text);
        serde_path_to_error::deserialize(de).map_err(|e| located(e.path().to_string(), e.inner().message().to_string()))
    }
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn emit<T: Serialize>(value: &T) -> CliResult<String> {
    canonical::to_string(value).map_err(|e| CliError::validation("output", e.to_string()))
}

fn dry_run<T: Serialize>(name: &str, config: &T, plan: &[String]) -> CliResult<Outcome> {
    print!(
        "{}",
        emit(&json!({ "subcommand": name, "config": config, "plan": plan, "dry_run": true }))?
    );
    Ok(Outcome::Ok)
}

fn log(cli: &Cli, msg: &str) {
    if cli.verbose > 0 {
        eprintln!("{msg}");
    }
}

pub fn dispatch(cmd: Command, cli: &Cli) -> CliResult<Outcome> {
    let cfg = cli.config.as_deref();
    match cmd {
        Command::Simulate => simulate(cli, load(cfg)?),
        Command::Ladder => ladder(cli, load(cfg)?),
        Command::Jensen => jensen_cmd(cli, load(cfg)?, cfg),
        Command::Wavecone => wavecone(cli, load(cfg)?),
        Command::Envelope => envelope(cli, load(cfg)?),
        Command::RelativeEnergy => relative_energy(cli, load(cfg)?),
        Command::Residual => residual(cli, load(cfg)?),
    }
}

fn default_sim() -> SimConfig {
    let params = Params::new(2, 2.0, 0.1, 1.0, 0.5).expect("valid defaults");
    SimConfig::new(64, params, InitRecipe::default())
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(default = "default_sim")]
    pub sim: SimConfig,
    #[serde(default = "yes")]
    pub write_snapshots: bool,
}

impl Default for SimulateRequest {
    fn default() -> Self {
        SimulateRequest {
            sim: default_sim(),
            write_snapshots: true,
        }
    }
}

fn simulate(cli: &Cli, req: SimulateRequest) -> CliResult<Outcome> {
    req.sim.validate()?;
    if cli.dry_run {
        return dry_run(
            "simulate",
            &req,
            &[
                format!("run solver n = {} to T = {}", req.sim.n, req.sim.params.t_final),
                "write snapshots, energy sidecar and simulate.json".into(),
            ],
        );
    }
    log(cli, "running solver");
    let traj = solver::run(&req.sim)?;
    let out = &cli.output_dir;
    let mut files = Vec::new();
    if req.write_snapshots {
        let dir = out.join("snapshots");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (k, s) in traj.snapshots.iter().enumerate() {
            let path = dir.join(format!("snap_{k:04}.lmsnap"));
            snapshot::write_snapshot(&path, s, &req.sim.params)?;
            files.push(format!("snapshots/snap_{k:04}.lmsnap"));
        }
    }
    let sidecar = EnergySidecar {
        params: req.sim.params,
        n: req.sim.n,
        series: traj.energy.clone(),
    };
    write_file(out, "energy.json", emit(&sidecar)?.as_bytes())?;
    let (m0, p0) = traj.initial.mass_momentum();
    let (m1, p1) = traj.final_state().mass_momentum();
    let summary = json!({
        "schema": REPORT_SCHEMA,
        "config": req.sim,
        "steps": traj.steps,
        "admissibility": admissibility_check(&traj),
        "mass": [m0, m1],
        "momentum": [p0, p1],
        "snapshots": files,
        "energy_sidecar": "energy.json",
    });
    let text = emit(&summary)?;
    write_file(out, "simulate.json", text.as_bytes())?;
    print!("{text}");
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderRequest {
    #[serde(default)]
    pub ladder: MachLadder,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    /// Exit with a check failure when any cell is reported violated.
    #[serde(default = "yes")]
    pub assert_no_violation: bool,
}

impl Default for LadderRequest {
    fn default() -> Self {
        LadderRequest {
            ladder: MachLadder::default(),
            analysis: AnalysisOptions::default(),
            assert_no_violation: true,
        }
    }
}

fn seed_budgets(b: &mut JensenBudgets, seed: u64) {
    b.search.seed = seed;
    if let Some(pw) = b.planewave.as_mut() {
        pw.search.seed = seed;
    }
}

fn ladder(cli: &Cli, mut req: LadderRequest) -> CliResult<Outcome> {
    req.ladder.validate()?;
    seed_budgets(&mut req.analysis.jensen_budgets, cli.seed);
    if cli.dry_run {
        let plan: Vec<String> = req
            .ladder
            .eps_list
            .iter()
            .map(|e| format!("run eps = {e:e} at n = {}", req.ladder.template.n))
            .chain([
                format!(
                    "extract measures (coarsen {} x {})",
                    req.analysis.coarsen, req.analysis.coarsen_t
                ),
                "write report.json and report.csv".into(),
            ])
            .collect();
        return dry_run("ladder", &req, &plan);
    }
    log(cli, "running ladder");
    let runs = limit_driver::run_ladder(&req.ladder)?;
    log(cli, "analysing");
    let an = limit_driver::analyze_ladder(&req.ladder, &runs, &req.analysis)?;
    let augmented: Vec<_> = an
        .augmented
        .iter()
        .zip(&req.ladder.eps_list)
        .map(|(a, e)| json!({"eps": e, "max": a.max, "max_momentum": a.max_momentum, "max_divergence": a.max_divergence}))
        .collect();
    let doc = json!({
        "schema": REPORT_SCHEMA,
        "seed": cli.seed,
        "report": an.report,
        "augmented_residual": augmented,
        "taylor": an.taylor,
        "relative_energy": an.relative_energy,
    });
    let text = emit(&doc)?;
    write_file(&cli.output_dir, "report.json", text.as_bytes())?;
    write_file(&cli.output_dir, "report.csv", an.report.to_csv().as_bytes())?;
    print!("{}", emit(&an.report.rungs)?);
    match &an.report.jensen {
        Some(j) if req.assert_no_violation && j.violated > 0 => Ok(Outcome::CheckFailed(format!(
            "{} violated cells in a ladder-extracted measure",
            j.violated
        ))),
        _ => Ok(Outcome::Ok),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JensenRequest {
    /// Young measure file over `(u, P)`, relative to the config file.
    #[serde(default)]
    pub measure: Option<PathBuf>,
    /// Inline cells, each a list of atoms `{weight, point: [u1, u2, P]}`.
    #[serde(default)]
    pub cells: Option<Vec<Vec<Atom>>>,
    #[serde(default)]
    pub budgets: JensenBudgets,
    #[serde(default)]
    pub c: [f64; 2],
    #[serde(default)]
    pub p0: f64,
    #[serde(default)]
    pub assert_no_violation: bool,
}

fn jensen_cmd(cli: &Cli, mut req: JensenRequest, cfg: Option<&Path>) -> CliResult<Outcome> {
    seed_budgets(&mut req.budgets, cli.seed);
    let mu = match (&req.measure, &req.cells) {
        (Some(p), None) => {
            let path = match cfg.and_then(Path::parent) {
                Some(base) if p.is_relative() => base.join(p),
                _ => p.clone(),
            };
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            YoungMeasure::from_json(&text)?
        }
        (None, Some(cells)) => {
            if cells.is_empty() {
                return Err(CliError::validation("cells", "must not be empty"));
            }
            let grid = SpacetimeGrid {
                d: 2,
                nt: cells.len(),
                nx: 1,
                t_final: 1.0,
            };
            let cells = cells
                .iter()
                .map(|c| AtomicMeasure::new(c.clone()))
                .collect::<lowmach::error::Result<Vec<_>>>()?;
            YoungMeasure::new(grid, cells)?
        }
        _ => return Err(CliError::validation("measure", "give exactly one of `measure` or `cells`")),
    };
    if cli.dry_run {
        return dry_run(
            "jensen",
            &req,
            &[format!("jensen report on {} cells", mu.cells.len())],
        );
    }
    let dict = jensen::default_jensen_dictionary(2, &req.c, req.p0)?;
    let report = limit_driver::jensen_necessary_check(&mu, &dict, &req.budgets)?;
    let text = emit(&report)?;
    write_file(&cli.output_dir, "jensen.json", text.as_bytes())?;
    print!(
        "{}",
        emit(&json!({
            "violated": report.violated,
            "satisfied_certified": report.satisfied_certified,
            "inconclusive": report.inconclusive,
            "violated_fraction": report.violated_fraction,
        }))?
    );
    if req.assert_no_violation && report.violated > 0 {
        return Ok(Outcome::CheckFailed(format!("{} violated cells", report.violated)));
    }
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveconeRequest {
    pub u1: [f64; 2],
    pub p1: f64,
    pub u2: [f64; 2],
    pub p2: f64,
    #[serde(default)]
    pub options: WaveConeOptions,
}

impl Default for WaveconeRequest {
    fn default() -> Self {
        WaveconeRequest {
            u1: [1.0, 0.0],
            p1: 1.0,
            u2: [0.0, 0.0],
            p2: 0.0,
            options: WaveConeOptions::default(),
        }
    }
}

fn lifted(u: [f64; 2], p: f64) -> CliResult<RelaxedState> {
    Ok(lift_s(&AugmentedState::new(u.to_vec(), p))?)
}

fn wavecone(cli: &Cli, req: WaveconeRequest) -> CliResult<Outcome> {
    let z1 = lifted(req.u1, req.p1)?;
    let z2 = lifted(req.u2, req.p2)?;
    if cli.dry_run {
        return dry_run(
            "wavecone",
            &req,
            &["determinant of the contraction".into(), "wave-cone sweep of z1 - z2".into()],
        );
    }
    let det = diatomic_det(&z1, &z2)?;
    let dz = z1.sub(&z2);
    let op = OperatorAE::new(2)?;
    let wc = if dz.norm() == 0.0 {
        None
    } else {
        Some(wave_cone_membership(&op, &dz, &req.options)?)
    };
    let doc = json!({
        "determinant": det.determinant,
        "closed_form": det.closed_form,
        "matrix": det.matrix,
        "member": wc.as_ref().map(|w| w.member).unwrap_or(true),
        "min_singular_value": wc.as_ref().map(|w| w.min_singular_value).unwrap_or(0.0),
        "best_direction": wc.as_ref().map(|w| w.best_direction.clone()),
    });
    let text = emit(&doc)?;
    write_file(&cli.output_dir, "wavecone.json", text.as_bytes())?;
    print!("{text}");
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    /// An entry of the default Jensen dictionary, by name.
    Dictionary {
        name: String,
        #[serde(default)]
        c: [f64; 2],
        #[serde(default)]
        p0: f64,
    },
    /// `-(v . z)^2` with `v` the first unit kernel vector at `eta`.
    NegSquareKernel { eta: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Laminate,
    Planewave,
    Both,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeRequest {
    pub u: [f64; 2],
    pub p: f64,
    pub function: FunctionSpec,
    pub depth: usize,
    pub q: Vec<f64>,
    pub method: Method,
    #[serde(default)]
    pub search: SearchOptions,
    pub planewave: PlaneWaveOptions,
}

impl Default for EnvelopeRequest {
    fn default() -> Self {
        EnvelopeRequest {
            u: [0.4, 0.2],
            p: 0.3,
            function: FunctionSpec::NegSquareKernel { eta: [0.3, 0.8, -0.5] },
            depth: 1,
            q: vec![0.25, 0.5],
            method: Method::Both,
            search: SearchOptions::default(),
            planewave: PlaneWaveOptions {
                modes: 1,
                quad_points: 256,
                search: SearchOptions::default(),
            },
        }
    }
}

fn build_function(spec: &FunctionSpec) -> CliResult<TestFunction> {
    match spec {
        FunctionSpec::Dictionary { name, c, p0 } => {
            let dict = jensen::default_jensen_dictionary(2, c, *p0)?;
            dict.entries
                .into_iter()
                .find(|f| &f.name == name)
                .ok_or_else(|| CliError::validation("function.name", format!("unknown dictionary entry `{name}`")))
        }
        FunctionSpec::NegSquareKernel { eta } => {
            let op = OperatorAE::new(2)?;
            let k = op.kernel(eta)?;
            let v = k.column(0).into_owned();
            let v: Vec<f64> = (v.clone() / v.norm()).as_slice().to_vec();
            Ok(TestFunction::new("-(v.z)^2", Some(6), f64::INFINITY, f64::INFINITY, move |z| {
                let s: f64 = z.iter().zip(&v).map(|(a, b)| a * b).sum();
                -s * s
            }))
        }
    }
}

fn estimate_json(est: &EnvelopeEstimate, f: &TestFunction, z: &RelaxedState) -> serde_json::Value {
    json!({
        "q": est.q_used,
        "value": est.value,
        "recheck_mismatch": est.recheck(f, z.as_slice()),
        "max_excursion": est.certificate.max_excursion(z.as_slice()),
        "certificate": est.certificate,
    })
}

fn envelope(cli: &Cli, mut req: EnvelopeRequest) -> CliResult<Outcome> {
    req.search.seed = cli.seed;
    req.planewave.search.seed = cli.seed;
    let z = lifted(req.u, req.p)?;
    let f = build_function(&req.function)?;
    if req.q.is_empty() {
        return Err(CliError::validation("q", "need at least one radius"));
    }
    if req.q.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::validation("q", "radii must be nondecreasing"));
    }
    if cli.dry_run {
        return dry_run(
            "envelope",
            &req,
            &[format!("{:?} estimates at {} radii", req.method, req.q.len())],
        );
    }
    let fz = f.eval(z.as_slice());
    let laminate = if req.method != Method::Planewave {
        Some(envelope_upper_laminate_sweep(&f, &z, req.depth, &req.q, &req.search)?)
    } else {
        None
    };
    let planewave = if req.method != Method::Laminate {
        Some(envelope_upper_planewave_sweep(&f, &z, &req.q, &req.planewave)?)
    } else {
        None
    };
    let to_json = |v: &Option<Vec<EnvelopeEstimate>>| {
        v.as_ref()
            .map(|ests| ests.iter().map(|e| estimate_json(e, &f, &z)).collect::<Vec<_>>())
    };
    let doc = json!({
        "function": f.name,
        "f_z": fz,
        "z": z.as_slice(),
        "laminate": to_json(&laminate),
        "planewave": to_json(&planewave),
    });
    let text = emit(&doc)?;
    write_file(&cli.output_dir, "envelope.json", text.as_bytes())?;
    print!("{text}");
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeEnergyRequest {
    #[serde(default = "default_sim")]
    pub sim: SimConfig,
}

impl Default for RelativeEnergyRequest {
    fn default() -> Self {
        RelativeEnergyRequest { sim: default_sim() }
    }
}

fn relative_energy(cli: &Cli, req: RelativeEnergyRequest) -> CliResult<Outcome> {
    req.sim.validate()?;
    let InitRecipe::WellpreparedVortex { amplitude } = req.sim.init else {
        return Err(CliError::validation(
            "sim.init",
            "relative energy needs the wellprepared_vortex recipe",
        ));
    };
    if cli.dry_run {
        return dry_run(
            "relative-energy",
            &req,
            &["run solver".into(), "relative energy against the steady vortex".into()],
        );
    }
    let traj = solver::run(&req.sim)?;
    let u = limit_driver::vortex_reference(req.sim.n, amplitude);
    let rep = limit_driver::relative_energy_monitor(&traj, &u, limit_driver::vortex_gradient_sup(amplitude))?;
    let text = emit(&rep)?;
    write_file(&cli.output_dir, "relative_energy.json", text.as_bytes())?;
    print!("{text}");
    if rep.holds {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed("relative energy exceeds its Gronwall bound".into()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualRequest {
    #[serde(default = "default_sim")]
    pub sim: SimConfig,
    #[serde(default = "default_kmax")]
    pub kmax: i64,
    /// Fail the check when the largest residual exceeds this.
    #[serde(default)]
    pub tolerance: Option<f64>,
}

fn default_kmax() -> i64 {
    2
}

impl Default for ResidualRequest {
    fn default() -> Self {
        ResidualRequest {
            sim: default_sim(),
            kmax: default_kmax(),
            tolerance: None,
        }
    }
}

fn residual(cli: &Cli, req: ResidualRequest) -> CliResult<Outcome> {
    req.sim.validate()?;
    if req.kmax < 0 {
        return Err(CliError::validation("kmax", "must be nonnegative"));
    }
    let basis = weak_test_basis(req.kmax);
    if cli.dry_run {
        return dry_run(
            "residual",
            &req,
            &["run solver".into(), format!("weak residual against {} tests", basis.len())],
        );
    }
    let traj = solver::run(&req.sim)?;
    let table = weak_residual(&traj, &basis)?;
    let text = emit(&table)?;
    write_file(&cli.output_dir, "residual.json", text.as_bytes())?;
    print!("{}", emit(&json!({"max": table.max, "tests": table.entries.len()}))?);
    match req.tolerance {
        Some(tol) if table.max > tol => Ok(Outcome::CheckFailed(format!(
            "weak residual {:e} exceeds {:e}",
            table.max, tol
        ))),
        _ => Ok(Outcome::Ok),
    }
}
