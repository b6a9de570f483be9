//! Low Mach ladders: runs the solver over decreasing `eps`, lifts the
//! results to `(u, P)`, extracts empirical Young measures and checks them
//! against the limit theory.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::compressible_solver::{
    self as solver, admissibility_check, energy_relative_parts, vortex_velocity,
    FieldState, Flux, InitRecipe, SimConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::fft;
use crate::jensen::{self, JensenBudgets, JensenReport};
use crate::par;
use crate::state_space::Params;
use crate::young_measure::{
    empirical_from_field, half_space_modes, pressure_from_velocity, time_bump, ym_distance, AtomicMeasure,
    MatrixField, SampledField, SpacetimeGrid, TestDictionary, WindowFamily, YoungMeasure,
};

pub const DEFAULT_EPS: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

/// `expm1(y) - y`, accurate for small `y`.
fn expm1_minus_id(y: f64) -> f64 {
    if y.abs() < 0.1 {
        let mut term = y * y / 2.0;
        let mut acc: f64 = 0.0;
        let mut k = 2.0;
        while term.abs() > 1e-18 * acc.abs().max(1e-300) {
            acc += term;
            k += 1.0;
            term *= y / k;
        }
        acc
    } else {
        y.exp_m1() - y
    }
}

/// `ln(1 + x) - x`, accurate for small `x`.
fn ln1p_minus_id(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let mut acc: f64 = 0.0;
        let mut pow = x * x;
        let mut k = 2.0;
        while pow.abs() / k > 1e-18 * acc.abs().max(1e-300) {
            let sign = if (k as i64) % 2 == 0 { -1.0 } else { 1.0 };
            acc += sign * pow / k;
            pow *= x;
            k += 1.0;
        }
        acc
    } else {
        x.ln_1p() - x
    }
}

/// Pressure lift `(rho^g - rho_bar^g) / (eps rho_bar)` without cancellation.
pub fn pressure_lift(rho: f64, p: &Params) -> f64 {
    let x = (rho - p.rho_bar) / p.rho_bar;
    p.rho_bar.powf(p.gamma - 1.0) * (p.gamma * x.ln_1p()).exp_m1() / p.eps
}

/// `lift - gamma rho_bar^(g-2) (rho - rho_bar) / eps`, evaluated through the
/// stable remainders of `exp` and `ln` so small gaps are not lost to
/// cancellation.
pub fn taylor_gap_pointwise(rho: f64, p: &Params) -> f64 {
    let g = p.gamma;
    let x = (rho - p.rho_bar) / p.rho_bar;
    let y = g * x.ln_1p();
    // (1+x)^g - 1 - g x = (expm1(y) - y) + g (ln1p(x) - x)
    let rem = expm1_minus_id(y) + g * ln1p_minus_id(x);
    p.rho_bar.powf(g - 1.0) * rem / p.eps
}

/// Snapshot times `0, (j + 1/2) T / nt (j < nt), T`; the interior ones are
/// the time-slab centers of the extracted Young measures.
pub fn ladder_snapshot_times(t_final: f64, nt: usize) -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend((0..nt).map(|j| (j as f64 + 0.5) * t_final / nt as f64));
    v.push(t_final);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachLadder {
    pub eps_list: Vec<f64>,
    /// Shared configuration; its `params.eps` and `snapshot_times` are
    /// replaced per rung.
    pub template: SimConfig,
    /// Per-rung initial data; the template recipe when absent.
    #[serde(default)]
    pub inits: Option<Vec<InitRecipe>>,
    /// Lifted snapshots per run, taken at the centers of equal time slabs;
    /// the extracted measures group `coarsen_t` of them per cell.
    #[serde(default = "default_samples")]
    pub time_samples: usize,
}

fn default_samples() -> usize {
    64
}

impl Default for MachLadder {
    fn default() -> Self {
        let params = Params::new(2, 2.0, 1.0, 1.0, 0.5).expect("valid defaults");
        let mut template = SimConfig::new(64, params, InitRecipe::default());
        template.flux = Flux::RusanovLowmach;
        MachLadder {
            eps_list: DEFAULT_EPS.to_vec(),
            template,
            inits: None,
            time_samples: default_samples(),
        }
    }
}

impl MachLadder {
    pub fn validate(&self) -> Result<()> {
        if self.eps_list.is_empty() {
            return Err(Error::invalid("eps_list", "must not be empty"));
        }
        for w in self.eps_list.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::invalid("eps_list", "must be strictly decreasing"));
            }
        }
        if self.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("eps_list", "must be positive"));
        }
        if let Some(inits) = &self.inits {
            if inits.len() != self.eps_list.len() {
                return Err(Error::invalid("inits", "need one recipe per eps"));
            }
        }
        if self.time_samples == 0 {
            return Err(Error::invalid("time_samples", "must be positive"));
        }
        self.config_for(0).validate()
    }

    pub fn config_for(&self, i: usize) -> SimConfig {
        let mut c = self.template.clone();
        c.params.eps = self.eps_list[i];
        c.snapshot_times = ladder_snapshot_times(c.params.t_final, self.time_samples);
        if let Some(inits) = &self.inits {
            c.init = inits[i].clone();
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct LadderRun {
    pub eps: f64,
    pub traj: Trajectory,
    /// `(u, P)` at the slab-center snapshots, on the solver grid.
    pub lifted: SampledField,
}

fn lift_snapshots(traj: &Trajectory, slabs: usize) -> SampledField {
    let p = &traj.config.params;
    let n = traj.config.n;
    let grid = SpacetimeGrid {
        d: 2,
        nt: slabs,
        nx: n,
        t_final: p.t_final,
    };
    let mut data = Vec::with_capacity(grid.cells() * 3);
    for s in &traj.snapshots[1..=slabs] {
        for q in 0..s.cells() {
            data.push(s.u[0][q]);
            data.push(s.u[1][q]);
            data.push(pressure_lift(s.rho[q], p));
        }
    }
    SampledField { grid, dim: 3, data }
}

/// Run every rung (in parallel) and lift each trajectory.
pub fn run_ladder(ladder: &MachLadder) -> Result<Vec<LadderRun>> {
    ladder.validate()?;
    let idx: Vec<usize> = (0..ladder.eps_list.len()).collect();
    par::map_slice(&idx, |&i| {
        let eps = ladder.eps_list[i];
        let cfg = ladder.config_for(i);
        let traj = solver::run(&cfg).map_err(|e| Error::Ladder {
            eps,
            source: Box::new(e),
        })?;
        let lifted = lift_snapshots(&traj, ladder.time_samples);
        Ok(LadderRun { eps, traj, lifted })
    })
    .into_iter()
    .collect()
}

/// `||rho - rho_bar||` in `L^2((0, T) x T^2)`, trapezoid in time over the
/// snapshots.
pub fn concentration_norm(traj: &Trajectory) -> f64 {
    let rb = traj.config.params.rho_bar;
    let sq: Vec<f64> = traj
        .snapshots
        .iter()
        .map(|s| s.rho.iter().map(|r| (r - rb) * (r - rb)).sum::<f64>() * s.h() * s.h())
        .collect();
    let mut acc = 0.0;
    for k in 1..sq.len() {
        acc += 0.5 * (sq[k] + sq[k - 1]) * (traj.snapshots[k].time - traj.snapshots[k - 1].time);
    }
    acc.sqrt()
}

/// `sup |P|` over all snapshots and cells.
pub fn lift_sup(traj: &Trajectory) -> f64 {
    let p = &traj.config.params;
    traj.snapshots
        .iter()
        .flat_map(|s| s.rho.iter().map(|r| pressure_lift(*r, p).abs()))
        .fold(0.0, f64::max)
}

pub fn density_deviation_sup(traj: &Trajectory) -> f64 {
    let rb = traj.config.params.rho_bar;
    traj.snapshots
        .iter()
        .flat_map(|s| s.rho.iter().map(move |r| (r - rb).abs()))
        .fold(0.0, f64::max)
}

/// Time-averaged spectral `||div u||_{L^2}` over the snapshots.
pub fn divergence_residual(traj: &Trajectory) -> f64 {
    let mut acc = 0.0;
    for s in &traj.snapshots {
        let n = s.n;
        let shape = [n, n];
        let ux = fft::coefficients(&s.u[0], &shape);
        let uy = fft::coefficients(&s.u[1], &shape);
        let mut idx = [0; 2];
        let mut sum = 0.0;
        for q in 0..n * n {
            fft::unravel(q, &shape, &mut idx);
            let kx = 2.0 * PI * fft::wavenumber(idx[0], n) as f64;
            let ky = 2.0 * PI * fft::wavenumber(idx[1], n) as f64;
            sum += (ux[q] * kx + uy[q] * ky).norm_sqr();
        }
        acc += sum.sqrt();
    }
    acc / traj.snapshots.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub fit_residual: f64,
    /// `max norm / sqrt(eps)`.
    pub constant: f64,
    pub ratios: Vec<f64>,
    pub pass: bool,
}

pub const MIN_CONCENTRATION_SLOPE: f64 = 0.45;

/// Least-squares slope of `log norm` against `log eps`; passes when the
/// slope is at least `0.45` and `norm <= C sqrt(eps)` with a finite `C`.
pub fn concentration_rate(points: &[(f64, f64)]) -> Result<ConcentrationFit> {
    if points.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: points.len(),
        });
    }
    if points.iter().any(|(e, v)| !(*e > 0.0) || !(*v > 0.0)) {
        return Err(Error::invalid("points", "eps and norms must be positive"));
    }
    let xs: Vec<f64> = points.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fit_residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let ratios: Vec<f64> = points.iter().map(|(e, v)| v / e.sqrt()).collect();
    let constant = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(ConcentrationFit {
        slope,
        intercept,
        fit_residual,
        constant,
        pass: slope >= MIN_CONCENTRATION_SLOPE && constant.is_finite(),
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftBound {
    pub sup: f64,
    pub last: f64,
    pub median: f64,
    pub pass: bool,
}

/// Uniform bound of the pressure lift across the ladder: passes when the
/// finest rung is at most twice the ladder median.
pub fn lift_uniform_bound(sups: &[f64]) -> Result<LiftBound> {
    if sups.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut sorted = sups.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let last = *sups.last().expect("nonempty");
    let sup = sorted[m - 1];
    Ok(LiftBound {
        sup,
        last,
        median,
        pass: sup.is_finite() && last <= 2.0 * median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CauchyEntry {
    pub eps_coarse: f64,
    pub eps_fine: f64,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct LimitExtraction {
    pub measures: Vec<(f64, YoungMeasure)>,
    pub cauchy: Vec<CauchyEntry>,
}

impl LimitExtraction {
    /// The finest-`eps` measure, standing in for the limit.
    pub fn limit(&self) -> &YoungMeasure {
        &self.measures.last().expect("nonempty ladder").1
    }
}

/// Empirical measures of each rung's lifted field plus distances between
/// consecutive rungs. The dictionary defaults to cut-off monomials on a ball
/// enclosing all supports.
pub fn extract_limit_measure(
    runs: &[LadderRun],
    coarsen: usize,
    coarsen_t: usize,
    dict: Option<&TestDictionary>,
    windows: &WindowFamily,
) -> Result<LimitExtraction> {
    if runs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let measures: Vec<(f64, YoungMeasure)> = runs
        .iter()
        .map(|r| Ok((r.eps, empirical_from_field(&r.lifted, coarsen, coarsen_t)?)))
        .collect::<Result<_>>()?;
    let default_dict;
    let dict = match dict {
        Some(d) => d,
        None => {
            let r = measures
                .iter()
                .flat_map(|(_, m)| m.cells.iter().map(|c| c.support_radius()))
                .fold(0.0, f64::max);
            default_dict = TestDictionary::default_for(3, 1.5 * r.max(1e-3));
            &default_dict
        }
    };
    let cauchy = measures
        .windows(2)
        .map(|w| {
            Ok(CauchyEntry {
                eps_coarse: w[0].0,
                eps_fine: w[1].0,
                distance: ym_distance(&w[0].1, &w[1].1, dict, windows)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LimitExtraction { measures, cauchy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentedTest {
    MomentumX,
    MomentumY,
    Divergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEntry {
    pub test: AugmentedTest,
    pub k: [i64; 2],
    pub sine: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedResidual {
    pub entries: Vec<AugmentedEntry>,
    pub max: f64,
    pub max_momentum: f64,
    pub max_divergence: f64,
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `int_{t0}^{t1} b` for the bump `b(t) = (1 + cos(pi t / T)) / 2`.
fn bump_integral(t0: f64, t1: f64, t_final: f64) -> f64 {
    let w = PI / t_final;
    0.5 * ((t1 - t0) + ((w * t1).sin() - (w * t0).sin()) / w)
}

/// Residuals of the augmented weak formulation for a measure over `(u, P)`
/// that is piecewise constant on its cells:
/// momentum `int int b' phi.<u> + b grad phi : <u (x) u> + b <P> div phi + int phi . u_0`
/// and divergence `int int b grad psi . <u>`, with `phi = e_l psi` and
/// `psi` a cosine or sine of `2 pi k.x`, `|k_i| <= kmax`. Cell and slab
/// integrals of the test functions are exact. `u0` holds the initial
/// velocity per spatial cell of the measure grid.
pub fn augmented_solution_residual(
    mu: &YoungMeasure,
    u0: &[[f64; 2]],
    windows: &WindowFamily,
) -> Result<AugmentedResidual> {
    let g = mu.grid;
    if g.d != 2 || mu.dim != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: mu.dim,
        });
    }
    let sc = g.spatial_cells();
    if u0.len() != sc {
        return Err(Error::DimensionMismatch {
            expected: sc,
            got: u0.len(),
        });
    }
    // per-cell moments: <u>, <u (x) u> (xx, xy, yy), <P>
    let moments: Vec<[f64; 6]> = par::map_slice(&mu.cells, |c| {
        let mut m = [0.0; 6];
        for a in c.atoms() {
            let (u, v, p) = (a.point[0], a.point[1], a.point[2]);
            for (slot, val) in m.iter_mut().zip([u, v, u * u, u * v, v * v, p]) {
                *slot += a.weight * val;
            }
        }
        m
    });
    let h = 1.0 / g.nx as f64;
    let vol = h * h;
    let dt = g.t_final / g.nt as f64;
    let slabs: Vec<(f64, f64)> = (0..g.nt)
        .map(|j| {
            let (t0, t1) = (j as f64 * dt, (j + 1) as f64 * dt);
            (
                bump_integral(t0, t1, g.t_final),
                time_bump(t1, g.t_final) - time_bump(t0, g.t_final),
            )
        })
        .collect();
    let mut tests = Vec::new();
    for k in half_space_modes(2, windows.kmax) {
        for sine in [false, true] {
            if sine && k == vec![0, 0] {
                continue;
            }
            for test in [AugmentedTest::MomentumX, AugmentedTest::MomentumY, AugmentedTest::Divergence] {
                tests.push(([k[0], k[1]], sine, test));
            }
        }
    }
    let entries = par::map_slice(&tests, |&(k, sine, test)| {
        let kv = [2.0 * PI * k[0] as f64, 2.0 * PI * k[1] as f64];
        let damp = sinc(0.5 * kv[0] * h) * sinc(0.5 * kv[1] * h);
        // cell averages of psi and grad psi
        let psi_cell = |cell: usize| -> (f64, [f64; 2]) {
            let (i, j) = (cell / g.nx, cell % g.nx);
            let x = (i as f64 + 0.5) * h;
            let y = (j as f64 + 0.5) * h;
            let arg = kv[0] * x + kv[1] * y;
            let (val, dval) = if sine { (arg.sin(), arg.cos()) } else { (arg.cos(), -arg.sin()) };
            (damp * val, [damp * kv[0] * dval, damp * kv[1] * dval])
        };
        let mut acc = 0.0;
        for s in 0..sc {
            let (val, grad) = psi_cell(s);
            for (jt, (bint, bdiff)) in slabs.iter().enumerate() {
                let m = &moments[jt * sc + s];
                acc += match test {
                    AugmentedTest::MomentumX => {
                        bdiff * val * m[0] + bint * (grad[0] * m[2] + grad[1] * m[3] + grad[0] * m[5])
                    }
                    AugmentedTest::MomentumY => {
                        bdiff * val * m[1] + bint * (grad[0] * m[3] + grad[1] * m[4] + grad[1] * m[5])
                    }
                    AugmentedTest::Divergence => bint * (grad[0] * m[0] + grad[1] * m[1]),
                };
            }
            // b(0) = 1 boundary term
            acc += match test {
                AugmentedTest::MomentumX => val * u0[s][0],
                AugmentedTest::MomentumY => val * u0[s][1],
                AugmentedTest::Divergence => 0.0,
            };
        }
        AugmentedEntry {
            test,
            k,
            sine,
            residual: (acc * vol).abs(),
        }
    });
    let max_of = |pred: &dyn Fn(&AugmentedEntry) -> bool| {
        entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.residual)
            .fold(0.0, f64::max)
    };
    Ok(AugmentedResidual {
        max: max_of(&|_| true),
        max_momentum: max_of(&|e| e.test != AugmentedTest::Divergence),
        max_divergence: max_of(&|e| e.test == AugmentedTest::Divergence),
        entries,
    })
}

/// Block-averaged initial velocity of a rung on a grid `coarsen` times coarser.
pub fn coarse_initial_velocity(traj: &Trajectory, coarsen: usize) -> Result<Vec<[f64; 2]>> {
    let s = &traj.initial;
    if coarsen == 0 || s.n % coarsen != 0 {
        return Err(Error::IndivisibleCoarsening {
            factor: coarsen,
            len: s.n,
        });
    }
    let nc = s.n / coarsen;
    let mut out = vec![[0.0; 2]; nc * nc];
    let w = 1.0 / (coarsen * coarsen) as f64;
    for q in 0..s.cells() {
        let (i, j) = (q / s.n, q % s.n);
        let c = (i / coarsen) * nc + j / coarsen;
        out[c][0] += w * s.u[0][q];
        out[c][1] += w * s.u[1][q];
    }
    Ok(out)
}

/// The steady vortex as a Dirac-valued measure `delta_(U, Pi)` on `grid`,
/// with `Pi` solving `-Laplace Pi = div div (U (x) U)`. Returns the measure
/// and `U` per spatial cell.
pub fn steady_vortex_dirac(grid: SpacetimeGrid, amplitude: f64) -> Result<(YoungMeasure, Vec<[f64; 2]>)> {
    let n = grid.nx;
    let h = 1.0 / n as f64;
    let u: Vec<Vec<f64>> = (0..n * n)
        .map(|q| {
            let v = vortex_velocity(amplitude, ((q / n) as f64 + 0.5) * h, ((q % n) as f64 + 0.5) * h);
            vec![v[0], v[1]]
        })
        .collect();
    let pi = pressure_from_velocity(&MatrixField::from_velocity(2, n, &u))?;
    let mut cells = Vec::with_capacity(grid.cells());
    for _ in 0..grid.nt {
        for q in 0..n * n {
            cells.push(AtomicMeasure::dirac(vec![u[q][0], u[q][1], pi[q]]));
        }
    }
    let u0 = u.iter().map(|v| [v[0], v[1]]).collect();
    Ok((YoungMeasure::new(grid, cells)?, u0))
}

/// Scale used for augmented residual bounds: `T (2 pi kmax) (|U|_inf^2 + |Pi|_inf)`.
pub fn augmented_scale(mu: &YoungMeasure, windows: &WindowFamily) -> f64 {
    let mut s: f64 = 0.0;
    for c in &mu.cells {
        for a in c.atoms() {
            let u2 = a.point[0] * a.point[0] + a.point[1] * a.point[1];
            s = s.max(u2 + a.point[2].abs());
        }
    }
    mu.grid.t_final * 2.0 * PI * windows.kmax.max(1) as f64 * s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeEnergyReport {
    pub times: Vec<f64>,
    /// `1/2 int |u - U|^2` per snapshot.
    pub e_rel: Vec<f64>,
    pub grad_u_sup: f64,
    /// Model error allowance from the Mach number (`sqrt(eps) |U|_2^2`).
    pub model_error_eps: f64,
    /// Model error allowance from the grid (`h |U|_2^2`).
    pub model_error_grid: f64,
    pub bound: Vec<f64>,
    pub holds: bool,
}

/// Relative energy against a steady strong solution `U` with
/// `||grad U||_inf = grad_u_sup`, and the Gronwall-type envelope
/// `(E_rel(0) + model error) exp(2 t ||grad U||_inf)`.
pub fn relative_energy_monitor(
    traj: &Trajectory,
    reference: &[Vec<f64>; 2],
    grad_u_sup: f64,
) -> Result<RelativeEnergyReport> {
    let p = traj.config.params;
    let n2 = traj.config.n * traj.config.n;
    if reference[0].len() != n2 || reference[1].len() != n2 {
        return Err(Error::DimensionMismatch {
            expected: n2,
            got: reference[0].len(),
        });
    }
    let h = 1.0 / traj.config.n as f64;
    let u_l2sq: f64 = (0..n2)
        .map(|q| reference[0][q].powi(2) + reference[1][q].powi(2))
        .sum::<f64>()
        * h
        * h;
    let mut unit = p;
    unit.rho_bar = 1.0;
    let times: Vec<f64> = traj.snapshots.iter().map(|s| s.time).collect();
    let e_rel: Vec<f64> = traj
        .snapshots
        .iter()
        .map(|s| {
            let mut ones = s.clone();
            ones.rho.iter_mut().for_each(|r| *r = 1.0);
            energy_relative_parts(&ones, &unit, Some(reference)).0
        })
        .collect();
    let model_error_eps = p.eps.sqrt() * u_l2sq;
    let model_error_grid = h * u_l2sq;
    let e0 = e_rel.first().copied().unwrap_or(0.0);
    let bound: Vec<f64> = times
        .iter()
        .map(|t| (e0 + model_error_eps + model_error_grid) * (2.0 * grad_u_sup * t).exp())
        .collect();
    let holds = e_rel.iter().zip(&bound).all(|(e, b)| e <= b);
    Ok(RelativeEnergyReport {
        times,
        e_rel,
        grad_u_sup,
        model_error_eps,
        model_error_grid,
        bound,
        holds,
    })
}

/// `||grad U||_inf` for the steady vortex of amplitude `A`: `(2 pi)^2 A`.
pub fn vortex_gradient_sup(amplitude: f64) -> f64 {
    (2.0 * PI).powi(2) * amplitude.abs()
}

pub fn vortex_reference(n: usize, amplitude: f64) -> [Vec<f64>; 2] {
    let s = FieldState::from_fn(n, |x, y| (1.0, vortex_velocity(amplitude, x, y)));
    s.u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorGap {
    pub eps: f64,
    /// Space-time `L^1` norm of the gap, trapezoid in time.
    pub gap_l1: f64,
    /// Largest pointwise relative mismatch against `(rho - rho_bar)^2/(eps rho_bar)`
    /// (only meaningful for `gamma = 2`).
    pub identity_mismatch: f64,
}

/// Gap between the exact lift and its linearisation per rung.
pub fn taylor_consistency(runs: &[LadderRun]) -> Vec<TaylorGap> {
    runs.iter()
        .map(|r| {
            let p = r.traj.config.params;
            let snaps = &r.traj.snapshots;
            let mut mismatch: f64 = 0.0;
            let per: Vec<f64> = snaps
                .iter()
                .map(|s| {
                    let mut acc = 0.0;
                    for &rho in &s.rho {
                        let gap = taylor_gap_pointwise(rho, &p);
                        acc += gap.abs();
                        if p.gamma == 2.0 {
                            let exact = (rho - p.rho_bar).powi(2) / (p.eps * p.rho_bar);
                            if exact > 0.0 {
                                mismatch = mismatch.max((gap - exact).abs() / exact);
                            } else {
                                mismatch = mismatch.max(gap.abs());
                            }
                        }
                    }
                    acc * s.h() * s.h()
                })
                .collect();
            let mut gap_l1 = 0.0;
            for k in 1..per.len() {
                gap_l1 += 0.5 * (per[k] + per[k - 1]) * (snaps[k].time - snaps[k - 1].time);
            }
            TaylorGap {
                eps: r.eps,
                gap_l1,
                identity_mismatch: mismatch,
            }
        })
        .collect()
}

/// Jensen check of a measure over `(u, P)`; a genuine low Mach limit must
/// never be reported as violated.
pub fn jensen_necessary_check(
    mu: &YoungMeasure,
    dict: &TestDictionary,
    budgets: &JensenBudgets,
) -> Result<JensenReport> {
    jensen::jensen_report(mu, dict, budgets)
}

/// Mean and max over cells of the pressure variance `<P^2> - <P>^2`.
pub fn pressure_variance(mu: &YoungMeasure) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for c in &mu.cells {
        let m = c.pair_with(|z| z[2]);
        let v = (c.pair_with(|z| z[2] * z[2]) - m * m).max(0.0);
        sum += v;
        max = max.max(v);
    }
    (sum / mu.cells.len().max(1) as f64, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub eps: f64,
    pub steps: usize,
    pub concentration_norm: f64,
    pub lift_sup: f64,
    pub density_deviation_sup: f64,
    /// `lift_sup <= (2 rho_bar + |rho - rho_bar|_inf) |rho - rho_bar|_inf / (eps rho_bar)` (gamma = 2).
    pub lift_density_consistent: bool,
    pub divergence_residual: f64,
    pub energy_excess: f64,
    pub e_rel_final: f64,
    pub augmented_residual_max: f64,
    pub taylor_gap_l1: f64,
    pub pressure_variance_mean: f64,
    pub pressure_variance_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenSummary {
    pub violated: usize,
    pub satisfied_certified: usize,
    pub inconclusive: usize,
    pub violated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachRunReport {
    pub ladder: MachLadder,
    pub rungs: Vec<RungReport>,
    pub concentration: Option<ConcentrationFit>,
    pub lift_bound: LiftBound,
    pub cauchy: Vec<CauchyEntry>,
    pub jensen: Option<JensenSummary>,
}

impl MachRunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per rung.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "eps,steps,concentration_norm,lift_sup,divergence_residual,energy_excess,e_rel_final,augmented_residual_max,taylor_gap_l1,pressure_variance_mean\n",
        );
        for r in &self.rungs {
            let _ = writeln!(
                s,
                "{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.eps,
                r.steps,
                r.concentration_norm,
                r.lift_sup,
                r.divergence_residual,
                r.energy_excess,
                r.e_rel_final,
                r.augmented_residual_max,
                r.taylor_gap_l1,
                r.pressure_variance_mean
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    pub coarsen: usize,
    pub coarsen_t: usize,
    pub windows: WindowFamily,
    /// Run the Jensen check on the finest measure.
    pub jensen: bool,
    pub jensen_budgets: JensenBudgets,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            coarsen: 4,
            coarsen_t: 4,
            windows: WindowFamily::default(),
            jensen: true,
            jensen_budgets: JensenBudgets::default(),
        }
    }
}

/// Everything the report needs from a finished ladder.
#[derive(Debug, Clone)]
pub struct LadderAnalysis {
    pub report: MachRunReport,
    pub extraction: LimitExtraction,
    pub augmented: Vec<AugmentedResidual>,
    pub relative_energy: Vec<Option<RelativeEnergyReport>>,
    pub taylor: Vec<TaylorGap>,
    pub jensen: Option<JensenReport>,
}

pub fn analyze_ladder(ladder: &MachLadder, runs: &[LadderRun], opts: &AnalysisOptions) -> Result<LadderAnalysis> {
    let extraction = extract_limit_measure(runs, opts.coarsen, opts.coarsen_t, None, &opts.windows)?;
    let augmented: Vec<AugmentedResidual> = runs
        .iter()
        .zip(&extraction.measures)
        .map(|(r, (_, mu))| {
            let u0 = coarse_initial_velocity(&r.traj, opts.coarsen)?;
            augmented_solution_residual(mu, &u0, &opts.windows)
        })
        .collect::<Result<_>>()?;
    let relative_energy: Vec<Option<RelativeEnergyReport>> = runs
        .iter()
        .map(|r| match r.traj.config.init {
            InitRecipe::WellpreparedVortex { amplitude } => {
                let u = vortex_reference(r.traj.config.n, amplitude);
                relative_energy_monitor(&r.traj, &u, vortex_gradient_sup(amplitude)).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let taylor = taylor_consistency(runs);
    let jensen = if opts.jensen {
        let dict = jensen::default_jensen_dictionary(2, &[0.0, 0.0], 0.0)?;
        Some(jensen_necessary_check(extraction.limit(), &dict, &opts.jensen_budgets)?)
    } else {
        None
    };
    let rungs: Vec<RungReport> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = r.traj.config.params;
            let ls = lift_sup(&r.traj);
            let dev = density_deviation_sup(&r.traj);
            let (pv_mean, pv_max) = pressure_variance(&extraction.measures[i].1);
            let adm = admissibility_check(&r.traj);
            let e_rel_final = relative_energy[i]
                .as_ref()
                .and_then(|e| e.e_rel.last().copied())
                .unwrap_or_else(|| {
                    energy_relative_parts(r.traj.final_state(), &p, None).0
                });
            RungReport {
                eps: r.eps,
                steps: r.traj.steps,
                concentration_norm: concentration_norm(&r.traj),
                lift_sup: ls,
                density_deviation_sup: dev,
                lift_density_consistent: p.gamma != 2.0
                    || ls <= (2.0 * p.rho_bar + dev) * dev / (p.eps * p.rho_bar) * (1.0 + 1e-12),
                divergence_residual: divergence_residual(&r.traj),
                energy_excess: adm.max_excess,
                e_rel_final,
                augmented_residual_max: augmented[i].max,
                taylor_gap_l1: taylor[i].gap_l1,
                pressure_variance_mean: pv_mean,
                pressure_variance_max: pv_max,
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = rungs.iter().map(|r| (r.eps, r.concentration_norm)).collect();
    let concentration = if points.len() >= 3 && points.iter().all(|p| p.1 > 0.0) {
        Some(concentration_rate(&points)?)
    } else {
        None
    };
    let lift_bound = lift_uniform_bound(&rungs.iter().map(|r| r.lift_sup).collect::<Vec<_>>())?;
    let report = MachRunReport {
        ladder: ladder.clone(),
        rungs,
        concentration,
        lift_bound,
        cauchy: extraction.cauchy.clone(),
        jensen: jensen.as_ref().map(|j| JensenSummary {
            violated: j.violated,
            satisfied_certified: j.satisfied_certified,
            inconclusive: j.inconclusive,
            violated_fraction: j.violated_fraction,
        }),
    };
    Ok(LadderAnalysis {
        report,
        extraction,
        augmented,
        relative_energy,
        taylor,
        jensen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(eps: f64) -> Params {
        Params::new(2, 2.0, eps, 1.0, 0.1).unwrap()
    }

    #[test]
    fn stable_lift_and_gap() {
        let pr = p(1e-3);
        for &rho in &[1.0, 1.0 + 1e-9, 1.0 - 3e-6, 1.02, 0.7, 1.5] {
            let direct = (rho * rho - 1.0) / pr.eps;
            assert_relative_eq!(pressure_lift(rho, &pr), direct, max_relative = 1e-9, epsilon = 1e-12);
            let exact = (rho - 1.0f64).powi(2) / pr.eps;
            let gap = taylor_gap_pointwise(rho, &pr);
            if exact == 0.0 {
                assert_eq!(gap, 0.0);
            } else {
                assert_relative_eq!(gap, exact, max_relative = 1e-12);
            }
        }
        let g = Params::new(2, 1.4, 0.01, 1.3, 1.0).unwrap();
        let rho = 1.31;
        let direct = (rho as f64).powf(1.4) - 1.3f64.powf(1.4) - 1.4 * 1.3f64.powf(0.4) * (rho - 1.3);
        assert_relative_eq!(taylor_gap_pointwise(rho, &g), direct / (g.eps * 1.3), max_relative = 1e-6);
    }

    #[test]
    fn concentration_fit_examples() {
        let eps = DEFAULT_EPS;
        let half: Vec<(f64, f64)> = eps.iter().map(|e| (*e, 0.7 * e.sqrt())).collect();
        let fit = concentration_rate(&half).unwrap();
        assert_relative_eq!(fit.slope, 0.5, max_relative = 1e-12);
        assert!(fit.pass);
        let lin: Vec<(f64, f64)> = eps.iter().map(|e| (*e, 3.0 * e)).collect();
        let fit = concentration_rate(&lin).unwrap();
        assert_relative_eq!(fit.slope, 1.0, max_relative = 1e-12);
        assert!(fit.pass);
        let flat: Vec<(f64, f64)> = eps.iter().map(|e| (*e, 0.1)).collect();
        assert!(!concentration_rate(&flat).unwrap().pass);
        assert!(concentration_rate(&half[..2]).is_err());
    }

    #[test]
    fn lift_bound_examples() {
        assert!(lift_uniform_bound(&[0.0, 0.0, 0.0]).unwrap().pass);
        // rho - rho_bar = eps h: lift = h (2 + eps h), bounded in eps
        let h = 0.3;
        let sups: Vec<f64> = DEFAULT_EPS.iter().map(|e| h * (2.0 + e * h)).collect();
        assert!(lift_uniform_bound(&sups).unwrap().pass);
        let growing: Vec<f64> = DEFAULT_EPS.iter().map(|e| 0.1 / e.sqrt()).collect();
        assert!(!lift_uniform_bound(&growing).unwrap().pass);
    }

    #[test]
    fn trivial_ladder() {
        let params = Params::new(2, 2.0, 1.0, 1.0, 0.05).unwrap();
        let ladder = MachLadder {
            eps_list: vec![1.0],
            template: SimConfig::new(16, params, InitRecipe::Rest { velocity: [0.0, 0.0] }),
            inits: None,
            time_samples: 4,
        };
        let runs = run_ladder(&ladder).unwrap();
        assert_eq!(runs.len(), 1);
        assert!(runs[0].lifted.data.iter().all(|x| *x == 0.0));
        let ex = extract_limit_measure(&runs, 1, 1, None, &WindowFamily::default()).unwrap();
        assert!(ex.cauchy.is_empty());
        assert!(ex.limit().cells.iter().all(|c| c.len() == 1));
        let mut opts = AnalysisOptions::default();
        opts.coarsen = 2;
        opts.coarsen_t = 2;
        let an = analyze_ladder(&ladder, &runs, &opts).unwrap();
        assert_eq!(an.report.rungs[0].lift_sup, 0.0);
        assert!(an.report.concentration.is_none());
        assert_eq!(an.jensen.unwrap().violated, 0);
        assert!(an.report.to_csv().lines().count() == 2);
    }

    #[test]
    fn ladder_validation() {
        let mut l = MachLadder::default();
        l.eps_list = vec![0.1, 0.1];
        assert!(l.validate().is_err());
        l.eps_list = vec![0.1, 0.01];
        l.inits = Some(vec![InitRecipe::default()]);
        assert!(l.validate().is_err());
    }

    #[test]
    fn identical_rungs_have_zero_distance() {
        let params = Params::new(2, 2.0, 0.1, 1.0, 0.05).unwrap();
        let ladder = MachLadder {
            eps_list: vec![0.1],
            template: SimConfig::new(16, params, InitRecipe::default()),
            inits: None,
            time_samples: 2,
        };
        let run = run_ladder(&ladder).unwrap().remove(0);
        let runs = vec![run.clone(), LadderRun { eps: 0.05, ..run }];
        let ex = extract_limit_measure(&runs, 2, 1, None, &WindowFamily::default()).unwrap();
        assert_eq!(ex.cauchy[0].distance, 0.0);
    }

    #[test]
    fn augmented_residual_examples() {
        let grid = SpacetimeGrid {
            d: 2,
            nt: 8,
            nx: 16,
            t_final: 0.5,
        };
        // zero velocity, constant pressure
        let mu = YoungMeasure::constant(grid, AtomicMeasure::dirac(vec![0.0, 0.0, 3.0]));
        let r = augmented_solution_residual(&mu, &vec![[0.0, 0.0]; 256], &WindowFamily::default()).unwrap();
        assert!(r.max < 1e-14, "{}", r.max);

        // steady vortex
        let (mu, u0) = steady_vortex_dirac(grid, 0.05).unwrap();
        let w = WindowFamily::default();
        let r = augmented_solution_residual(&mu, &u0, &w).unwrap();
        let scale = augmented_scale(&mu, &w);
        assert!(r.max <= 1e-2 * scale / 16.0, "{} vs {}", r.max, scale);

        // non-solenoidal barycenter
        let cells = (0..grid.cells())
            .map(|c| {
                let x = ((c % 256) / 16) as f64 / 16.0 + 1.0 / 32.0;
                AtomicMeasure::dirac(vec![(2.0 * PI * x).sin(), 0.0, 0.0])
            })
            .collect();
        let mu = YoungMeasure::new(grid, cells).unwrap();
        let r = augmented_solution_residual(&mu, &vec![[0.0, 0.0]; 256], &w).unwrap();
        assert!(r.max_divergence > 1e-2);
    }

    #[test]
    fn relative_energy_examples() {
        let params = Params::new(2, 2.0, 0.1, 1.0, 0.05).unwrap();
        let cfg = SimConfig::new(16, params, InitRecipe::Rest { velocity: [0.3, -0.4] }).with_uniform_snapshots(4);
        let traj = solver::run(&cfg).unwrap();
        let zero = [vec![0.0; 256], vec![0.0; 256]];
        let rep = relative_energy_monitor(&traj, &zero, 0.0).unwrap();
        for e in &rep.e_rel {
            assert_relative_eq!(*e, 0.5 * 0.25, max_relative = 1e-13);
        }
        let same = [vec![0.3; 256], vec![-0.4; 256]];
        let rep = relative_energy_monitor(&traj, &same, 0.0).unwrap();
        assert!(rep.e_rel.iter().all(|e| e.abs() < 1e-28));
        assert!(rep.holds);
    }

    #[test]
    fn pressure_variance_of_diracs_is_zero() {
        let grid = SpacetimeGrid {
            d: 2,
            nt: 1,
            nx: 2,
            t_final: 1.0,
        };
        let mu = YoungMeasure::constant(grid, AtomicMeasure::dirac(vec![0.1, 0.2, 0.3]));
        assert_eq!(pressure_variance(&mu), (0.0, 0.0));
    }
}
