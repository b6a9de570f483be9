//! Jensen-condition checks for Young measures over `(u, P)`.
//!
//! Violations are only ever reported from the exact two-atom criterion
//! `det B(z1 - z2) != 0`. Everything else works with upper bounds on the
//! (truncated) quasiconvex envelope, realised by explicit laminates or
//! plane-wave superpositions whose certificates can be re-evaluated.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::optimize::{lower_hull_at, nelder_mead, sphere_point};
use crate::par;
use crate::relaxed_operator::{diatomic_det, wave_cone_membership, OperatorAE, WaveConeOptions};
use crate::state_space::{lift_s, unlift_s, AugmentedState, RelaxedState};
use crate::young_measure::{AtomicMeasure, TestDictionary, TestFunction, YoungMeasure};

/// Nodes per line search, not counting `t = 0`.
pub const LINE_NODES: usize = 32;
/// Largest profile sharpness per quadrature point; keeps the midpoint rule
/// accurate to well below `1e-6` for the `tanh(beta sin)` profile.
pub const BETA_PER_QUAD_POINT: f64 = PI / 40.0;
pub const DEFAULT_DIATOMIC_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaminateNode {
    pub state: Vec<f64>,
    pub weight: f64,
    pub split: Option<Box<Split>>,
}

/// `y -> y + t_minus w` and `y + t_plus w` with `t_minus < 0 < t_plus` and
/// weights chosen so the barycenter stays at `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub eta: Vec<f64>,
    pub direction: Vec<f64>,
    pub t_minus: f64,
    pub t_plus: f64,
    pub minus: LaminateNode,
    pub plus: LaminateNode,
}

impl LaminateNode {
    fn leaf(state: Vec<f64>, weight: f64) -> Self {
        LaminateNode {
            state,
            weight,
            split: None,
        }
    }

    pub fn leaves(&self) -> Vec<&LaminateNode> {
        match &self.split {
            None => vec![self],
            Some(s) => {
                let mut v = s.minus.leaves();
                v.extend(s.plus.leaves());
                v
            }
        }
    }

    fn leaves_mut(&mut self) -> Vec<&mut LaminateNode> {
        if self.split.is_none() {
            return vec![self];
        }
        let s = self.split.as_mut().expect("checked above");
        let mut v = s.minus.leaves_mut();
        v.extend(s.plus.leaves_mut());
        v
    }

    pub fn depth(&self) -> usize {
        match &self.split {
            None => 0,
            Some(s) => 1 + s.minus.depth().max(s.plus.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveMode {
    pub eta: Vec<f64>,
    pub direction: Vec<f64>,
    pub amplitude: f64,
    pub beta: f64,
}

/// `h_beta(s) = tanh(beta sin 2 pi s) / tanh(beta)` (plain sine as `beta -> 0`).
pub fn sharpened_profile(beta: f64, s: f64) -> f64 {
    let x = (2.0 * PI * s).sin();
    if beta < 1e-8 {
        x
    } else {
        (beta * x).tanh() / beta.tanh()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    /// The zero oscillation.
    Trivial,
    Laminate { root: LaminateNode },
    /// `phi = sum_j a_j w_j h_{beta_j}(s_j)` averaged over independent phases
    /// `s_j` with a midpoint rule of `quad_points` nodes per phase.
    PlaneWave {
        modes: Vec<PlaneWaveMode>,
        quad_points: usize,
    },
}

impl Certificate {
    /// Recompute the certified value from scratch. Plane waves use
    /// `quad_mult` times the stored quadrature resolution; laminate leaves
    /// are rebuilt from the split data rather than read from the tree.
    pub fn evaluate(&self, f: &TestFunction, z: &[f64], quad_mult: usize) -> f64 {
        match self {
            Certificate::Trivial => f.eval(z),
            Certificate::Laminate { root } => rebuild_laminate(f, root, z, 1.0),
            Certificate::PlaneWave { modes, quad_points } => {
                plane_wave_average(f, z, modes, quad_points * quad_mult.max(1))
            }
        }
    }

    /// `sup |phi|` of the realising oscillation.
    pub fn max_excursion(&self, z: &[f64]) -> f64 {
        match self {
            Certificate::Trivial => 0.0,
            Certificate::Laminate { root } => root
                .leaves()
                .iter()
                .map(|l| dist(&l.state, z))
                .fold(0.0, f64::max),
            Certificate::PlaneWave { modes, .. } => modes.iter().map(|m| m.amplitude.abs()).sum(),
        }
    }
}

fn rebuild_laminate(f: &TestFunction, node: &LaminateNode, y: &[f64], weight: f64) -> f64 {
    match &node.split {
        None => weight * f.eval(y),
        Some(s) => {
            let len = s.t_plus - s.t_minus;
            let ym: Vec<f64> = y.iter().zip(&s.direction).map(|(a, w)| a + s.t_minus * w).collect();
            let yp: Vec<f64> = y.iter().zip(&s.direction).map(|(a, w)| a + s.t_plus * w).collect();
            rebuild_laminate(f, &s.minus, &ym, weight * s.t_plus / len)
                + rebuild_laminate(f, &s.plus, &yp, weight * (-s.t_minus) / len)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeEstimate {
    pub value: f64,
    pub certificate: Certificate,
    pub q_used: f64,
    pub bound_kind: BoundKind,
}

impl EnvelopeEstimate {
    fn trivial(f: &TestFunction, z: &[f64], q: f64) -> Self {
        EnvelopeEstimate {
            value: f.eval(z),
            certificate: Certificate::Trivial,
            q_used: q,
            bound_kind: BoundKind::Upper,
        }
    }

    /// Relative mismatch between the stored value and an independent
    /// re-evaluation of the certificate (`4x` quadrature for plane waves).
    pub fn recheck(&self, f: &TestFunction, z: &[f64]) -> f64 {
        let again = self.certificate.evaluate(f, z, 4);
        let scale = self.value.abs().max(again.abs()).max(f.eval(z).abs());
        if scale == 0.0 {
            return 0.0;
        }
        (again - self.value).abs() / scale
    }
}

/// Search budgets for the envelope estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub trials: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            trials: 4,
            iterations: 200,
            seed: 0,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-14 * old.abs().max(1e-300)
}

/// Unit kernel direction `P(eta) c / |P(eta) c|` for angle-parametrised `eta`.
fn kernel_direction(op: &OperatorAE, angles: &[f64], c: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let eta = sphere_point(angles);
    let proj = op.kernel_projector(&eta).ok()?;
    let w = proj * DVector::from_column_slice(c);
    let norm = w.norm();
    if norm < 1e-12 {
        return None;
    }
    Some((eta, (w / norm).as_slice().to_vec()))
}

struct LineResult {
    value: f64,
    t_minus: f64,
    t_plus: f64,
}

/// Lower convex envelope at `t = 0` of `t -> f(y + t w)` on the part of the
/// line inside the ball `B(root, q)`.
fn line_envelope(f: &TestFunction, root: &[f64], y: &[f64], w: &[f64], q: f64) -> Option<LineResult> {
    let delta: Vec<f64> = y.iter().zip(root).map(|(a, b)| a - b).collect();
    let b: f64 = delta.iter().zip(w).map(|(a, x)| a * x).sum();
    let c = delta.iter().map(|x| x * x).sum::<f64>() - q * q;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let r = disc.sqrt();
    // stay a hair inside the ball so leaf excursions never exceed q
    let shrink = 1.0 - 1e-12;
    let (lo, hi) = ((-b - r) * shrink, (-b + r) * shrink);
    if !(lo < 0.0 && hi > 0.0) {
        return None;
    }
    let mut ts: Vec<f64> = (0..=LINE_NODES)
        .map(|k| lo + (hi - lo) * k as f64 / LINE_NODES as f64)
        .collect();
    ts.push(0.0);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let gs: Vec<f64> = ts
        .iter()
        .map(|t| {
            let p: Vec<f64> = y.iter().zip(w).map(|(a, x)| a + t * x).collect();
            f.eval(&p)
        })
        .collect();
    let (value, ia, ib) = lower_hull_at(&ts, &gs, 0.0);
    if ia == ib {
        return None;
    }
    Some(LineResult {
        value,
        t_minus: ts[ia],
        t_plus: ts[ib],
    })
}

#[derive(Debug, Clone)]
struct SplitCandidate {
    eta: Vec<f64>,
    direction: Vec<f64>,
    line: LineResultOwned,
}

#[derive(Debug, Clone, Copy)]
struct LineResultOwned {
    value: f64,
    t_minus: f64,
    t_plus: f64,
}

/// Best single split of node `y`: cached directions first, then Nelder-Mead
/// over `(eta angles, c)`.
fn best_split(
    op: &OperatorAE,
    f: &TestFunction,
    root: &[f64],
    y: &[f64],
    q: f64,
    opts: &SearchOptions,
    seed: u64,
    warm: &[(Vec<f64>, Vec<f64>)],
) -> Option<SplitCandidate> {
    let n = op.n();
    let d = op.d();
    let fy = f.eval(y);
    let mut best: Option<SplitCandidate> = None;
    let consider = |eta: Vec<f64>, w: Vec<f64>, best: &mut Option<SplitCandidate>| {
        if let Some(l) = line_envelope(f, root, y, &w, q) {
            let cur = best.as_ref().map(|b| b.line.value).unwrap_or(fy);
            if improves(l.value, cur) {
                *best = Some(SplitCandidate {
                    eta,
                    direction: w,
                    line: LineResultOwned {
                        value: l.value,
                        t_minus: l.t_minus,
                        t_plus: l.t_plus,
                    },
                });
            }
        }
    };
    for (eta, w) in warm {
        consider(eta.clone(), w.clone(), &mut best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..opts.trials {
        let mut x0: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..PI)).collect();
        x0.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let objective = |x: &[f64]| -> f64 {
            match kernel_direction(op, &x[..d], &x[d..]) {
                Some((_, w)) => line_envelope(f, root, y, &w, q).map(|l| l.value).unwrap_or(fy),
                None => fy,
            }
        };
        let (x, _) = nelder_mead(objective, &x0, 0.5, opts.iterations);
        if let Some((eta, w)) = kernel_direction(op, &x[..d], &x[d..]) {
            consider(eta, w, &mut best);
        }
    }
    best
}

fn laminate_value(f: &TestFunction, root: &LaminateNode) -> f64 {
    root.leaves().iter().map(|l| l.weight * f.eval(&l.state)).sum()
}

fn laminate_search(
    op: &OperatorAE,
    f: &TestFunction,
    z: &[f64],
    depth: usize,
    q: f64,
    opts: &SearchOptions,
    warm: &[(Vec<f64>, Vec<f64>)],
) -> LaminateNode {
    let mut root = LaminateNode::leaf(z.to_vec(), 1.0);
    for level in 0..depth {
        let leaves = root.leaves_mut();
        for (k, leaf) in leaves.into_iter().enumerate() {
            if leaf.depth() > 0 {
                continue;
            }
            let seed = opts
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((level as u64) << 32 | k as u64);
            if let Some(c) = best_split(op, f, z, &leaf.state, q, opts, seed, warm) {
                let y = leaf.state.clone();
                let w = &c.direction;
                let (tm, tp) = (c.line.t_minus, c.line.t_plus);
                let len = tp - tm;
                let wm = leaf.weight * tp / len;
                let wp = leaf.weight * (-tm) / len;
                let ym: Vec<f64> = y.iter().zip(w).map(|(a, x)| a + tm * x).collect();
                let yp: Vec<f64> = y.iter().zip(w).map(|(a, x)| a + tp * x).collect();
                leaf.split = Some(Box::new(Split {
                    eta: c.eta,
                    direction: c.direction,
                    t_minus: tm,
                    t_plus: tp,
                    minus: LaminateNode::leaf(ym, wm),
                    plus: LaminateNode::leaf(yp, wp),
                }));
            }
        }
    }
    root
}

fn check_estimator_input(op: &OperatorAE, z: &RelaxedState, depth: usize, q: f64) -> Result<()> {
    if z.dim() != op.d() {
        return Err(Error::DimensionMismatch {
            expected: op.d(),
            got: z.dim(),
        });
    }
    if depth == 0 {
        return Err(Error::invalid("depth", "must be at least 1"));
    }
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::invalid("q", "must be finite and nonnegative"));
    }
    Ok(())
}

/// Upper bound for the `q`-truncated envelope of `f` at `z` from a laminate
/// of the given depth. Each level greedily splits every leaf along the best
/// kernel direction found, so deeper searches refine shallower ones.
pub fn envelope_upper_laminate(
    f: &TestFunction,
    z: &RelaxedState,
    depth: usize,
    q: f64,
    opts: &SearchOptions,
) -> Result<EnvelopeEstimate> {
    let op = OperatorAE::new(z.dim())?;
    check_estimator_input(&op, z, depth, q)?;
    Ok(laminate_estimate(&op, f, z.as_slice(), depth, q, opts, &[]))
}

fn laminate_estimate(
    op: &OperatorAE,
    f: &TestFunction,
    z: &[f64],
    depth: usize,
    q: f64,
    opts: &SearchOptions,
    warm: &[(Vec<f64>, Vec<f64>)],
) -> EnvelopeEstimate {
    let root = laminate_search(op, f, z, depth, q, opts, warm);
    if root.split.is_none() {
        return EnvelopeEstimate::trivial(f, z, q);
    }
    let value = laminate_value(f, &root);
    if !improves(value, f.eval(z)) {
        return EnvelopeEstimate::trivial(f, z, q);
    }
    EnvelopeEstimate {
        value,
        certificate: Certificate::Laminate { root },
        q_used: q,
        bound_kind: BoundKind::Upper,
    }
}

/// Laminate estimates for increasing truncation radii. Directions found at
/// one radius seed the search at the next, and a certificate admissible at a
/// smaller radius stays admissible, so the values are nonincreasing in `q`.
pub fn envelope_upper_laminate_sweep(
    f: &TestFunction,
    z: &RelaxedState,
    depth: usize,
    qs: &[f64],
    opts: &SearchOptions,
) -> Result<Vec<EnvelopeEstimate>> {
    let op = OperatorAE::new(z.dim())?;
    let mut out: Vec<EnvelopeEstimate> = Vec::with_capacity(qs.len());
    let mut warm: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, &q) in qs.iter().enumerate() {
        check_estimator_input(&op, z, depth, q)?;
        if i > 0 && q < qs[i - 1] {
            return Err(Error::invalid("qs", "must be nondecreasing"));
        }
        let mut est = laminate_estimate(&op, f, z.as_slice(), depth, q, opts, &warm);
        if let Certificate::Laminate { root } = &est.certificate {
            collect_directions(root, &mut warm);
        }
        if let Some(prev) = out.last() {
            if prev.value < est.value {
                est = EnvelopeEstimate {
                    q_used: q,
                    ..prev.clone()
                };
            }
        }
        out.push(est);
    }
    Ok(out)
}

fn collect_directions(node: &LaminateNode, out: &mut Vec<(Vec<f64>, Vec<f64>)>) {
    if let Some(s) = &node.split {
        out.push((s.eta.clone(), s.direction.clone()));
        collect_directions(&s.minus, out);
        collect_directions(&s.plus, out);
    }
}

/// Options for [`envelope_upper_planewave`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveOptions {
    pub modes: usize,
    pub quad_points: usize,
    pub search: SearchOptions,
}

impl Default for PlaneWaveOptions {
    fn default() -> Self {
        PlaneWaveOptions {
            modes: 2,
            quad_points: 32,
            search: SearchOptions::default(),
        }
    }
}

fn plane_wave_average(f: &TestFunction, z: &[f64], modes: &[PlaneWaveMode], quad: usize) -> f64 {
    let m = modes.len();
    if m == 0 {
        return f.eval(z);
    }
    // profile samples per mode, scaled by amplitude
    let samples: Vec<Vec<f64>> = modes
        .iter()
        .map(|md| {
            (0..quad)
                .map(|i| md.amplitude * sharpened_profile(md.beta, (i as f64 + 0.5) / quad as f64))
                .collect()
        })
        .collect();
    let total = quad.pow(m as u32);
    let mut acc = 0.0;
    let mut point = vec![0.0; z.len()];
    for flat in 0..total {
        point.copy_from_slice(z);
        let mut rest = flat;
        for (j, md) in modes.iter().enumerate() {
            let i = rest % quad;
            rest /= quad;
            let s = samples[j][i];
            for (p, w) in point.iter_mut().zip(&md.direction) {
                *p += s * w;
            }
        }
        acc += f.eval(&point);
    }
    acc / total as f64
}

fn decode_modes(
    op: &OperatorAE,
    x: &[f64],
    modes: usize,
    q: f64,
    beta_max: f64,
) -> Option<Vec<PlaneWaveMode>> {
    let d = op.d();
    let n = op.n();
    let per = d + n + 2;
    let raw: Vec<f64> = (0..modes).map(|j| x[j * per + d + n]).collect();
    let total: f64 = raw.iter().map(|a| a.abs()).sum();
    let scale = if total > q && total > 0.0 { q / total } else { 1.0 };
    let mut out = Vec::with_capacity(modes);
    for j in 0..modes {
        let b = &x[j * per..(j + 1) * per];
        let (eta, w) = kernel_direction(op, &b[..d], &b[d..d + n])?;
        out.push(PlaneWaveMode {
            eta,
            direction: w,
            amplitude: raw[j] * scale,
            beta: beta_max / (1.0 + (-b[d + n + 1]).exp()),
        });
    }
    Some(out)
}

/// Upper bound for the `q`-truncated envelope from superpositions of up to
/// `modes` kernel plane waves with sharpened sine profiles, total amplitude
/// clipped to `q`. The torus average is taken over independent phases.
pub fn envelope_upper_planewave(
    f: &TestFunction,
    z: &RelaxedState,
    q: f64,
    opts: &PlaneWaveOptions,
) -> Result<EnvelopeEstimate> {
    let op = OperatorAE::new(z.dim())?;
    check_estimator_input(&op, z, 1, q)?;
    if opts.modes == 0 || opts.quad_points < 4 {
        return Err(Error::invalid("planewave", "need modes >= 1 and quad_points >= 4"));
    }
    let zs = z.as_slice();
    let fz = f.eval(zs);
    let quad = opts.quad_points;
    let beta_max = BETA_PER_QUAD_POINT * quad as f64;
    let d = op.d();
    let n = op.n();
    let per = d + n + 2;
    let mut best: Option<(f64, Vec<PlaneWaveMode>)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.search.seed ^ 0x5EED_0F_57A7E);
    for _ in 0..opts.search.trials {
        let mut x0 = Vec::with_capacity(per * opts.modes);
        for _ in 0..opts.modes {
            x0.extend((0..d).map(|_| rng.random_range(0.0..PI)));
            x0.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            x0.push(q / opts.modes as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 });
            x0.push(2.0);
        }
        let objective = |x: &[f64]| -> f64 {
            match decode_modes(&op, x, opts.modes, q, beta_max) {
                Some(m) => plane_wave_average(f, zs, &m, quad),
                None => fz,
            }
        };
        let step = 0.5 * q.max(1e-3);
        let (x, v) = nelder_mead(objective, &x0, step.min(1.0), opts.search.iterations);
        if best.as_ref().map(|b| v < b.0).unwrap_or(true) {
            if let Some(m) = decode_modes(&op, &x, opts.modes, q, beta_max) {
                best = Some((plane_wave_average(f, zs, &m, quad), m));
            }
        }
    }
    match best {
        Some((value, modes)) if improves(value, fz) => Ok(EnvelopeEstimate {
            value,
            certificate: Certificate::PlaneWave {
                modes,
                quad_points: quad,
            },
            q_used: q,
            bound_kind: BoundKind::Upper,
        }),
        _ => Ok(EnvelopeEstimate::trivial(f, zs, q)),
    }
}

/// Plane-wave estimates for nondecreasing radii, carried forward so the
/// values are nonincreasing in `q`.
pub fn envelope_upper_planewave_sweep(
    f: &TestFunction,
    z: &RelaxedState,
    qs: &[f64],
    opts: &PlaneWaveOptions,
) -> Result<Vec<EnvelopeEstimate>> {
    let mut out: Vec<EnvelopeEstimate> = Vec::with_capacity(qs.len());
    for (i, &q) in qs.iter().enumerate() {
        if i > 0 && q < qs[i - 1] {
            return Err(Error::invalid("qs", "must be nondecreasing"));
        }
        let mut est = envelope_upper_planewave(f, z, q, opts)?;
        if let Some(prev) = out.last() {
            if prev.value < est.value {
                est = EnvelopeEstimate {
                    q_used: q,
                    ..prev.clone()
                };
            }
        }
        out.push(est);
    }
    Ok(out)
}

/// Classical Jensen along a wave-cone segment: with `g(s) = f((1-s) z1 + s z2)`
/// and its lower convex hull over `samples` nodes, check
/// `lambda f(z1) + (1 - lambda) f(z2) >= hull(1 - lambda)` up to `1e-8` scale.
pub fn segment_convexity_jensen(
    f: &TestFunction,
    z1: &RelaxedState,
    z2: &RelaxedState,
    lambda: f64,
    samples: usize,
) -> Result<bool> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", "must lie in [0, 1]"));
    }
    if samples < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples,
        });
    }
    let op = OperatorAE::new(z1.dim())?;
    let diff = z1.sub(z2);
    if diff.norm() > 0.0 {
        let rep = wave_cone_membership(&op, &diff, &WaveConeOptions::default())?;
        if !rep.member {
            return Err(Error::NotWaveConeConnected {
                residual: rep.min_singular_value,
            });
        }
    }
    let a = z1.as_slice();
    let b = z2.as_slice();
    let mut ts: Vec<f64> = (0..samples).map(|k| k as f64 / (samples - 1) as f64).collect();
    let s_star = 1.0 - lambda;
    ts.push(s_star);
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ts.dedup();
    let gs: Vec<f64> = ts
        .iter()
        .map(|s| {
            let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect();
            f.eval(&p)
        })
        .collect();
    let (hull, _, _) = lower_hull_at(&ts, &gs, s_star);
    let combo = lambda * f.eval(a) + (1.0 - lambda) * f.eval(b);
    let scale = gs.iter().map(|g| g.abs()).fold(1.0, f64::max);
    Ok(combo >= hull - 1e-8 * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiatomicStatus {
    Violated,
    WaveConeConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiatomicCell {
    pub status: DiatomicStatus,
    pub determinant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiatomicReport {
    pub cells: Vec<DiatomicCell>,
    pub violated_fraction: f64,
}

/// Exact two-atom test on a measure over lifted states: a cell violates
/// the Jensen condition iff `|u1 - u2| > tol` and `|P1 - P2| > tol`.
pub fn diatomic_jensen_test(mu: &YoungMeasure, tol: f64) -> Result<DiatomicReport> {
    let cells = mu
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| diatomic_cell(c, i, tol))
        .collect::<Result<Vec<_>>>()?;
    let violated = cells
        .iter()
        .filter(|c| c.status == DiatomicStatus::Violated)
        .count();
    Ok(DiatomicReport {
        violated_fraction: violated as f64 / cells.len().max(1) as f64,
        cells,
    })
}

fn relaxed_atom(point: &[f64], d: usize) -> Result<RelaxedState> {
    RelaxedState::from_vec(d, point.to_vec())
}

fn diatomic_cell(cell: &AtomicMeasure, index: usize, tol: f64) -> Result<DiatomicCell> {
    let d = dim_from_relaxed(cell.dim())?;
    if d != 2 {
        return Err(Error::UnsupportedDimension(d));
    }
    match cell.atoms() {
        [a] => {
            unlift_s(&relaxed_atom(&a.point, d)?, 1e-12)?;
            Ok(DiatomicCell {
                status: DiatomicStatus::WaveConeConnected,
                determinant: 0.0,
            })
        }
        [a, b] => {
            let z1 = relaxed_atom(&a.point, d)?;
            let z2 = relaxed_atom(&b.point, d)?;
            let s1 = unlift_s(&z1, 1e-12)?;
            let s2 = unlift_s(&z2, 1e-12)?;
            let det = diatomic_det(&z1, &z2)?;
            let du = s1
                .u
                .iter()
                .zip(&s2.u)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dp = (s1.p - s2.p).abs();
            let status = if du > tol && dp > tol {
                DiatomicStatus::Violated
            } else {
                DiatomicStatus::WaveConeConnected
            };
            Ok(DiatomicCell {
                status,
                determinant: det.determinant,
            })
        }
        atoms => Err(Error::NotDiatomic {
            cell: index,
            atoms: atoms.len(),
        }),
    }
}

fn dim_from_relaxed(n: usize) -> Result<usize> {
    (2..=3)
        .find(|&d| crate::state_space::relaxed_dim(d) == n)
        .ok_or(Error::DimensionMismatch {
            expected: crate::state_space::relaxed_dim(2),
            got: n,
        })
}

/// Default test dictionary on relaxed states: coordinates, pairwise
/// products `z_i z_j` (`i < j`), `|z|^2`, and
/// `-|m - c|^2 (Q - |m|^2 / d - p0)`, which reads `-|u - c|^2 (P - p0)` on
/// lifted states.
pub fn default_jensen_dictionary(d: usize, c: &[f64], p0: f64) -> Result<TestDictionary> {
    if c.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: c.len(),
        });
    }
    let n = crate::state_space::relaxed_dim(d);
    let mut entries = Vec::new();
    for i in 0..n {
        entries.push(TestFunction::new(format!("z{i}"), Some(n), f64::INFINITY, f64::INFINITY, move |z| z[i]));
    }
    for i in 0..n {
        for j in i + 1..n {
            entries.push(TestFunction::new(
                format!("z{i}*z{j}"),
                Some(n),
                f64::INFINITY,
                f64::INFINITY,
                move |z| z[i] * z[j],
            ));
        }
    }
    entries.push(TestFunction::new("|z|^2", Some(n), f64::INFINITY, f64::INFINITY, |z| {
        z.iter().map(|x| x * x).sum()
    }));
    let c = c.to_vec();
    entries.push(TestFunction::new(
        "pressure_shear",
        Some(n),
        f64::INFINITY,
        f64::INFINITY,
        move |z| {
            let m = &z[1..=d];
            let m2: f64 = m.iter().map(|x| x * x).sum();
            let du2: f64 = m.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            -du2 * (z[n - 1] - m2 / d as f64 - p0)
        },
    ));
    TestDictionary::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JensenStatus {
    Violated,
    SatisfiedCertified,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub test: String,
    /// `<S_# nu, f> - U_f` for the tightest (or failing) `f`; the determinant
    /// for two-atom violations.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenCellStatus {
    pub status: JensenStatus,
    pub witness: Option<Witness>,
    pub atoms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenBudgets {
    /// Truncation radius; `None` uses `8 R` with `R` the cell's support radius.
    pub q: Option<f64>,
    pub depth: usize,
    pub search: SearchOptions,
    /// Plane-wave fallback when the laminate does not certify.
    pub planewave: Option<PlaneWaveOptions>,
    pub diatomic_tol: f64,
    /// Slack in `<f> >= U_f - tol (1 + |U_f|)`.
    pub certify_tol: f64,
}

impl Default for JensenBudgets {
    fn default() -> Self {
        JensenBudgets {
            q: None,
            depth: 1,
            search: SearchOptions {
                trials: 2,
                iterations: 150,
                seed: 0,
            },
            planewave: Some(PlaneWaveOptions {
                modes: 1,
                quad_points: 32,
                search: SearchOptions {
                    trials: 1,
                    iterations: 150,
                    seed: 0,
                },
            }),
            diatomic_tol: DEFAULT_DIATOMIC_TOL,
            certify_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub cells: Vec<JensenCellStatus>,
    pub violated: usize,
    pub satisfied_certified: usize,
    pub inconclusive: usize,
    /// Lebesgue measure fraction of violated cells (cells have equal volume).
    pub violated_fraction: f64,
}

impl JensenReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn lift_cell(cell: &AtomicMeasure, d: usize) -> Result<AtomicMeasure> {
    if cell.dim() != d + 1 {
        return Err(Error::DimensionMismatch {
            expected: d + 1,
            got: cell.dim(),
        });
    }
    let lifted = cell.pushforward(|z| {
        lift_s(&AugmentedState::from_slice(z))
            .map(|s| s.into_vec())
            .unwrap_or_default()
    })?;
    Ok(lifted)
}

/// Per-cell Jensen status of a measure over `(u, P)`.
///
/// Cells with at most two atoms get the exact verdict. Otherwise every
/// dictionary function must satisfy `<S_# nu, f> >= U_f(barycenter)` for an
/// upper envelope estimate `U_f` to certify the cell; failure to certify is
/// reported as inconclusive, never as a violation.
pub fn jensen_report(mu: &YoungMeasure, dict: &TestDictionary, budgets: &JensenBudgets) -> Result<JensenReport> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let d = mu.grid.d;
    let op = OperatorAE::new(d)?;
    let lifted: Vec<AtomicMeasure> = mu
        .cells
        .iter()
        .map(|c| lift_cell(c, d))
        .collect::<Result<_>>()?;
    // warm-start directions per dictionary entry from the global mean state
    let n = op.n();
    let mut mean = vec![0.0; n];
    for c in &lifted {
        for (m, b) in mean.iter_mut().zip(c.barycenter()) {
            *m += b / lifted.len() as f64;
        }
    }
    let q_global = budgets.q.unwrap_or_else(|| {
        8.0 * lifted.iter().map(|c| c.support_radius()).fold(0.0, f64::max)
    });
    let warm: Vec<Vec<(Vec<f64>, Vec<f64>)>> = par::map_slice(&dict.entries, |f| {
        let mut dirs = Vec::new();
        let root = laminate_search(&op, f, &mean, 1, q_global.max(1e-12), &budgets.search, &[]);
        collect_directions(&root, &mut dirs);
        dirs
    });
    let indexed: Vec<usize> = (0..lifted.len()).collect();
    let cells = par::map_slice(&indexed, |&i| {
        jensen_cell(&op, &lifted[i], i, dict, &warm, budgets)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let count = |s: JensenStatus| cells.iter().filter(|c| c.status == s).count();
    let violated = count(JensenStatus::Violated);
    Ok(JensenReport {
        violated,
        satisfied_certified: count(JensenStatus::SatisfiedCertified),
        inconclusive: count(JensenStatus::Inconclusive),
        violated_fraction: violated as f64 / cells.len().max(1) as f64,
        cells,
    })
}

fn jensen_cell(
    op: &OperatorAE,
    cell: &AtomicMeasure,
    index: usize,
    dict: &TestDictionary,
    warm: &[Vec<(Vec<f64>, Vec<f64>)>],
    budgets: &JensenBudgets,
) -> Result<JensenCellStatus> {
    let atoms = cell.len();
    if atoms == 1 {
        return Ok(JensenCellStatus {
            status: JensenStatus::SatisfiedCertified,
            witness: None,
            atoms,
        });
    }
    if atoms == 2 && op.d() == 2 {
        let dc = diatomic_cell(cell, index, budgets.diatomic_tol)?;
        return Ok(match dc.status {
            DiatomicStatus::Violated => JensenCellStatus {
                status: JensenStatus::Violated,
                witness: Some(Witness {
                    test: "diatomic_determinant".into(),
                    gap: dc.determinant,
                }),
                atoms,
            },
            // the two-point laminate along z1 - z2 realises <f> exactly
            DiatomicStatus::WaveConeConnected => JensenCellStatus {
                status: JensenStatus::SatisfiedCertified,
                witness: Some(Witness {
                    test: "wave_cone_connected".into(),
                    gap: 0.0,
                }),
                atoms,
            },
        });
    }
    let bary = cell.barycenter();
    let q = budgets.q.unwrap_or(8.0 * cell.support_radius());
    let mut tightest: Option<Witness> = None;
    for (fi, f) in dict.entries.iter().enumerate() {
        let avg = cell.pair(f)?;
        let tol = |u: f64| budgets.certify_tol * (1.0 + u.abs());
        let fz = f.eval(&bary);
        let mut upper = fz;
        if avg < upper - tol(upper) {
            let mut search = budgets.search;
            search.seed = search.seed ^ ((index as u64) << 20) ^ fi as u64;
            // cached directions only, then a full search
            let cheap = laminate_estimate(
                op,
                f,
                &bary,
                1,
                q,
                &SearchOptions { trials: 0, ..search },
                &warm[fi],
            );
            upper = upper.min(cheap.value);
            if avg < upper - tol(upper) {
                let full = laminate_estimate(op, f, &bary, budgets.depth, q, &search, &warm[fi]);
                upper = upper.min(full.value);
            }
            if avg < upper - tol(upper) {
                if let Some(pw) = budgets.planewave {
                    let z = RelaxedState::from_vec(op.d(), bary.clone())?;
                    let mut pw = pw;
                    pw.search.seed = search.seed;
                    upper = upper.min(envelope_upper_planewave(f, &z, q, &pw)?.value);
                }
            }
        }
        let gap = avg - upper;
        if gap < -tol(upper) {
            return Ok(JensenCellStatus {
                status: JensenStatus::Inconclusive,
                witness: Some(Witness {
                    test: f.name.clone(),
                    gap,
                }),
                atoms,
            });
        }
        if tightest.as_ref().map(|w| gap < w.gap).unwrap_or(true) {
            tightest = Some(Witness {
                test: f.name.clone(),
                gap,
            });
        }
    }
    Ok(JensenCellStatus {
        status: JensenStatus::SatisfiedCertified,
        witness: tightest,
        atoms,
    })
}
