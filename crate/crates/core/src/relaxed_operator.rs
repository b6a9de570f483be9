//! The linear first-order operator of the relaxed Euler system
//!
//! ```text
//! d_t m + div M + grad Q = 0,     d_t rho + div m = 0
//! ```
//!
//! acting on `(rho, m, M, Q)` over spacetime `R^{1+d}`. Frequencies are
//! written `eta = (tau, xi)` with the time component first. The symbol
//! `A(eta)` is the `(d+1) x N` matrix with `d` momentum rows followed by the
//! continuity row.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fft;
use crate::optimize::{nelder_mead, sphere_point};
use crate::par;
use crate::state_space::{relaxed_dim, tracefree_entry, unlift_s, RelaxedState};

/// Relative singular value threshold for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Default relative tolerance for wave-cone membership.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorAE {
    d: usize,
}

#[derive(Debug, Clone)]
pub struct FrequencySymbol {
    pub eta: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl OperatorAE {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid("d", "spatial dimension must be at least 2"));
        }
        Ok(OperatorAE { d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// State dimension `N`.
    pub fn n(&self) -> usize {
        relaxed_dim(self.d)
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.d + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.d + 1,
                got: eta.len(),
            });
        }
        Ok(())
    }

    /// Coefficient matrix of `d_l`, `l = 0` being time.
    pub fn coefficient(&self, l: usize) -> DMatrix<f64> {
        let mut eta = vec![0.0; self.d + 1];
        eta[l] = 1.0;
        self.symbol_matrix(&eta)
    }

    fn symbol_matrix(&self, eta: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        let n = self.n();
        let tau = eta[0];
        let xi = &eta[1..];
        let mut a = DMatrix::zeros(d + 1, n);
        let tf0 = 1 + d;
        for i in 0..d {
            a[(i, 1 + i)] += tau;
            for l in 0..d {
                for (k, c) in tracefree_entry(d, i, l) {
                    a[(i, tf0 + k)] += c * xi[l];
                }
            }
            a[(i, n - 1)] += xi[i];
        }
        a[(d, 0)] = tau;
        for l in 0..d {
            a[(d, 1 + l)] = xi[l];
        }
        a
    }

    pub fn symbol(&self, eta: &[f64]) -> Result<FrequencySymbol> {
        self.check_eta(eta)?;
        Ok(FrequencySymbol {
            eta: eta.to_vec(),
            matrix: self.symbol_matrix(eta),
        })
    }

    /// Apply `A(eta)` to a real state without forming the matrix.
    pub fn apply(&self, eta: &[f64], z: &[f64]) -> Vec<f64> {
        let d = self.d;
        let n = self.n();
        let tau = eta[0];
        let xi = &eta[1..];
        let tf0 = 1 + d;
        let mut out = vec![0.0; d + 1];
        for i in 0..d {
            let mut acc = tau * z[1 + i] + xi[i] * z[n - 1];
            for l in 0..d {
                for (k, c) in tracefree_entry(d, i, l) {
                    acc += c * xi[l] * z[tf0 + k];
                }
            }
            out[i] = acc;
        }
        out[d] = tau * z[0] + (0..d).map(|l| xi[l] * z[1 + l]).sum::<f64>();
        out
    }

    /// The `(d+1) x (d+1)` matrix `B(z)` with `B(z) eta = A(eta) z`.
    pub fn contraction(&self, z: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        let mut b = DMatrix::zeros(d + 1, d + 1);
        for l in 0..=d {
            let mut e = vec![0.0; d + 1];
            e[l] = 1.0;
            let col = self.apply(&e, z);
            for j in 0..=d {
                b[(j, l)] = col[j];
            }
        }
        b
    }

    /// Numerical rank of `A(eta)`.
    pub fn rank(&self, eta: &[f64]) -> Result<usize> {
        let s = self.symbol(eta)?;
        let sv = s.matrix.singular_values();
        let smax = sv.max();
        if smax == 0.0 {
            return Ok(0);
        }
        Ok(sv.iter().filter(|&&x| x > RANK_THRESHOLD * smax).count())
    }

    /// Orthonormal basis of `ker A(eta)`, returned as the columns of an
    /// `N x k` matrix.
    pub fn kernel(&self, eta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_eta(eta)?;
        if eta.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroFrequency);
        }
        let a = self.symbol_matrix(eta);
        let n = self.n();
        let svd = a.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let smax = svd.singular_values.max();
        let mut basis: Vec<DVector<f64>> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > RANK_THRESHOLD * smax)
            .map(|(i, _)| v_t.row(i).transpose().into_owned())
            .collect();
        let rank = basis.len();
        // complete the row space with unit vectors, keeping the best-conditioned
        let mut kernel: Vec<DVector<f64>> = Vec::new();
        while basis.len() < n {
            let mut best: Option<DVector<f64>> = None;
            let mut best_norm = 0.0;
            for e in 0..n {
                let mut v = DVector::zeros(n);
                v[e] = 1.0;
                for _ in 0..2 {
                    for b in &basis {
                        let c = b.dot(&v);
                        v.axpy(-c, b, 1.0);
                    }
                }
                let nv = v.norm();
                if nv > best_norm {
                    best_norm = nv;
                    best = Some(v / nv);
                }
            }
            let v = best.expect("complement exists");
            basis.push(v.clone());
            kernel.push(v);
        }
        debug_assert_eq!(kernel.len(), n - rank);
        Ok(DMatrix::from_columns(&kernel))
    }

    /// Orthogonal projector onto `ker A(eta)`, continuous in `eta != 0`.
    pub fn kernel_projector(&self, eta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_eta(eta)?;
        let a = self.symbol_matrix(eta);
        let gram = &a * a.transpose();
        let inv = gram.try_inverse().ok_or(Error::ZeroFrequency)?;
        let n = self.n();
        Ok(DMatrix::identity(n, n) - a.transpose() * inv * &a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantRankReport {
    pub constant: bool,
    pub rank: usize,
    pub min_rank: usize,
    pub max_rank: usize,
    pub samples: usize,
}

/// Quasi-uniform unit frequencies in `R^{d+1}`: a Fibonacci lattice on the
/// 2-sphere for `d = 2`, seeded Gaussian directions otherwise.
pub fn sphere_samples(d: usize, samples: usize, seed: u64) -> Vec<Vec<f64>> {
    if d == 2 {
        let golden = PI * (3.0 - 5f64.sqrt());
        return (0..samples)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / samples as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                vec![z, r * phi.cos(), r * phi.sin()]
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| random_unit(&mut rng, d + 1))
        .collect()
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rank of the symbol across `samples` unit frequencies scaled by `scale`.
pub fn constant_rank_check(d: usize, samples: usize, scale: f64) -> Result<ConstantRankReport> {
    let op = OperatorAE::new(d)?;
    let etas = sphere_samples(d, samples, 0);
    let ranks = par::map_slice(&etas, |eta| {
        let scaled: Vec<f64> = eta.iter().map(|x| x * scale).collect();
        op.rank(&scaled)
    });
    let ranks: Vec<usize> = ranks.into_iter().collect::<Result<_>>()?;
    let min_rank = *ranks.iter().min().unwrap_or(&0);
    let max_rank = *ranks.iter().max().unwrap_or(&0);
    Ok(ConstantRankReport {
        constant: min_rank == max_rank,
        rank: max_rank,
        min_rank,
        max_rank,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveConeReport {
    pub member: bool,
    /// Unit frequency minimising `|A(eta) z|`.
    pub best_direction: Vec<f64>,
    /// `min_{|eta|=1} |A(eta) z|`, i.e. the smallest singular value of the
    /// contraction `eta -> A(eta) z`.
    pub min_singular_value: f64,
    pub tolerance: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveConeOptions {
    /// Relative membership tolerance: member iff minimum <= tol |z|.
    pub tol: f64,
    /// Sweep points per angle coordinate; `None` picks the smallest count
    /// giving at least `64^{d+1}` points on the half sphere.
    pub per_angle: Option<usize>,
    pub refine_steps: usize,
    pub polish_steps: usize,
}

impl Default for WaveConeOptions {
    fn default() -> Self {
        WaveConeOptions {
            tol: MEMBERSHIP_TOL,
            per_angle: None,
            refine_steps: 50,
            polish_steps: 4,
        }
    }
}

fn residual_norm(b: &DMatrix<f64>, eta: &[f64]) -> f64 {
    let k = eta.len();
    let mut s = 0.0;
    for j in 0..k {
        let mut acc = 0.0;
        for l in 0..k {
            acc += b[(j, l)] * eta[l];
        }
        s += acc * acc;
    }
    s.sqrt()
}

/// Decide whether `z` lies in the wave cone `U_{|eta|=1} ker A(eta)`.
///
/// Sweeps the half sphere of frequencies on an angular grid, refines the best
/// grid point with Nelder–Mead in angle space and polishes with inverse
/// iteration on `B(z)^T B(z)`.
pub fn wave_cone_membership(
    op: &OperatorAE,
    z: &RelaxedState,
    opts: &WaveConeOptions,
) -> Result<WaveConeReport> {
    if z.dim() != op.d() {
        return Err(Error::DimensionMismatch {
            expected: op.d(),
            got: z.dim(),
        });
    }
    let znorm = z.norm();
    if znorm == 0.0 {
        return Err(Error::ZeroState);
    }
    let d = op.d();
    let b = op.contraction(z.as_slice());
    let per_angle = opts.per_angle.unwrap_or_else(|| {
        let target = 64f64.powi(d as i32 + 1);
        (target.powf(1.0 / d as f64) - 1e-9).ceil() as usize
    });
    // angles: d-1 polar angles in [0, pi], last azimuth in [0, pi)
    let total = per_angle.pow(d as u32);
    let chunk = per_angle.pow(d as u32 - 1);
    let partial = par::map_range(per_angle, |i0| {
        let mut best = (f64::INFINITY, 0usize);
        let mut idx = vec![0usize; d];
        let mut angles = vec![0.0; d];
        for r in 0..chunk {
            let flat = i0 * chunk + r;
            fft::unravel(flat, &vec![per_angle; d], &mut idx);
            for a in 0..d {
                angles[a] = PI * (idx[a] as f64 + 0.5) / per_angle as f64;
            }
            let eta = sphere_point(&angles);
            let v = residual_norm(&b, &eta);
            if v < best.0 {
                best = (v, flat);
            }
        }
        best
    });
    let (_, best_flat) = partial
        .into_iter()
        .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc });
    let mut idx = vec![0usize; d];
    fft::unravel(best_flat, &vec![per_angle; d], &mut idx);
    let start: Vec<f64> = idx
        .iter()
        .map(|&i| PI * (i as f64 + 0.5) / per_angle as f64)
        .collect();
    let (angles, _) = nelder_mead(
        |a| residual_norm(&b, &sphere_point(a)),
        &start,
        PI / per_angle as f64,
        opts.refine_steps,
    );
    let mut eta = sphere_point(&angles);
    let mut best = residual_norm(&b, &eta);
    if opts.polish_steps > 0 {
        let gram = b.transpose() * &b;
        let shift = 1e-14 * gram.norm().max(1e-300);
        let shifted = &gram + DMatrix::identity(d + 1, d + 1) * shift;
        let lu = shifted.lu();
        let mut v = DVector::from_column_slice(&eta);
        for _ in 0..opts.polish_steps {
            let Some(w) = lu.solve(&v) else { break };
            let nw = w.norm();
            if !(nw.is_finite() && nw > 0.0) {
                break;
            }
            v = w / nw;
            let cand: Vec<f64> = v.iter().copied().collect();
            let r = residual_norm(&b, &cand);
            if r < best {
                best = r;
                eta = cand;
            }
        }
    }
    // canonical sign: first nonzero component positive
    if let Some(first) = eta.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            eta.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(WaveConeReport {
        member: best <= opts.tol * znorm,
        best_direction: eta,
        min_singular_value: best,
        tolerance: opts.tol * znorm,
        grid_points: total,
    })
}

/// Determinant of the contraction for a pair of lifted states in `d = 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiatomicDeterminant {
    /// `B[j][l] = sum_i A^l_{ji} (z1 - z2)_i`.
    pub matrix: [[f64; 3]; 3],
    /// Cofactor expansion of `matrix`.
    pub determinant: f64,
    /// `-|u1 - u2|^2 (P1 - P2)`.
    pub closed_form: f64,
}

impl DiatomicDeterminant {
    /// Evaluate `eta -> B eta` (the symbol contracted with `z1 - z2`).
    pub fn contract(&self, eta: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for j in 0..3 {
            out[j] = (0..3).map(|l| self.matrix[j][l] * eta[l]).sum();
        }
        out
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn diatomic_det(z1: &RelaxedState, z2: &RelaxedState) -> Result<DiatomicDeterminant> {
    if z1.dim() != 2 || z2.dim() != 2 {
        return Err(Error::UnsupportedDimension(z1.dim().max(z2.dim())));
    }
    if z1.rho() != z2.rho() {
        return Err(Error::NotLifted(format!(
            "density slots differ: {} vs {}",
            z1.rho(),
            z2.rho()
        )));
    }
    let op = OperatorAE::new(2)?;
    let dz = z1.sub(z2);
    let coeffs: Vec<DMatrix<f64>> = (0..3).map(|l| op.coefficient(l)).collect();
    let mut matrix = [[0.0; 3]; 3];
    for j in 0..3 {
        for l in 0..3 {
            matrix[j][l] = (0..op.n()).map(|i| coeffs[l][(j, i)] * dz.as_slice()[i]).sum();
        }
    }
    let s1 = unlift_s(z1, 1e-12)?;
    let s2 = unlift_s(z2, 1e-12)?;
    let du2: f64 = s1.u.iter().zip(&s2.u).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(DiatomicDeterminant {
        determinant: det3(&matrix),
        closed_form: -du2 * (s1.p - s2.p),
        matrix,
    })
}

/// A relaxed-state field sampled on a regular grid over
/// `(0, t_len) x T^d`, stored component-major: `data[c][t][x_1]..[x_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacetimeField {
    pub d: usize,
    pub nt: usize,
    pub nx: usize,
    pub t_len: f64,
    pub data: Vec<f64>,
}

impl SpacetimeField {
    pub fn zeros(d: usize, nt: usize, nx: usize, t_len: f64) -> Self {
        let points = nt * nx.pow(d as u32);
        SpacetimeField {
            d,
            nt,
            nx,
            t_len,
            data: vec![0.0; relaxed_dim(d) * points],
        }
    }

    pub fn points(&self) -> usize {
        self.nt * self.nx.pow(self.d as u32)
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.nt];
        s.extend(std::iter::repeat(self.nx).take(self.d));
        s
    }

    pub fn n_comp(&self) -> usize {
        relaxed_dim(self.d)
    }

    /// Coordinates `(t, x_1, .., x_d)` of flat point index `p`.
    pub fn coords(&self, p: usize) -> Vec<f64> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        fft::unravel(p, &shape, &mut idx);
        let mut c = vec![self.t_len * idx[0] as f64 / self.nt as f64];
        c.extend(idx[1..].iter().map(|&i| i as f64 / self.nx as f64));
        c
    }

    pub fn set(&mut self, p: usize, z: &[f64]) {
        let pts = self.points();
        for (c, v) in z.iter().enumerate() {
            self.data[c * pts + p] = *v;
        }
    }

    pub fn get(&self, p: usize) -> Vec<f64> {
        let pts = self.points();
        (0..self.n_comp()).map(|c| self.data[c * pts + p]).collect()
    }

    pub fn add(&self, other: &SpacetimeField) -> SpacetimeField {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let pts = self.points();
        (0..self.n_comp())
            .map(|c| self.data[c * pts..(c + 1) * pts].iter().sum::<f64>() / pts as f64)
            .collect()
    }
}

/// Treatment of the (non-periodic) time direction before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeWindow {
    /// Field is periodic in time already.
    None,
    /// C^1 raised-cosine taper over the given fraction of `t_len` at each end.
    RaisedCosine { margin: f64 },
}

impl TimeWindow {
    pub const DEFAULT: TimeWindow = TimeWindow::RaisedCosine { margin: 0.1 };

    pub fn weight(&self, t: f64, t_len: f64) -> f64 {
        match *self {
            TimeWindow::None => 1.0,
            TimeWindow::RaisedCosine { margin } => {
                let w = margin * t_len;
                let s = t.min(t_len - t);
                if s <= 0.0 {
                    0.0
                } else if s >= w {
                    1.0
                } else {
                    0.5 * (1.0 - (PI * s / w).cos())
                }
            }
        }
    }
}

/// Spectral negative-norm residual of `A_E z` over `(0, t_len) x T^d`:
/// `( vol * sum_{k != 0} |A(eta_k) z_k|^2 / |eta_k|^2 )^{1/2}` with
/// `eta_k = 2 pi (k_t / t_len, k_x)` and `z_k` the normalised Fourier
/// coefficients of the (windowed) field.
pub fn ae_residual_negative_norm(field: &SpacetimeField, window: TimeWindow) -> Result<f64> {
    if field.nt < 8 || field.nx < 8 {
        return Err(Error::GridTooSmall(format!(
            "need >= 8 points per axis, got nt = {}, nx = {}",
            field.nt, field.nx
        )));
    }
    let op = OperatorAE::new(field.d)?;
    let shape = field.shape();
    let pts = field.points();
    let nc = field.n_comp();
    let weights: Vec<f64> = (0..field.nt)
        .map(|j| window.weight(field.t_len * j as f64 / field.nt as f64, field.t_len))
        .collect();
    let slab = pts / field.nt;
    let coeffs: Vec<Vec<Complex64>> = par::map_range(nc, |c| {
        let windowed: Vec<f64> = field.data[c * pts..(c + 1) * pts]
            .iter()
            .enumerate()
            .map(|(p, v)| v * weights[p / slab])
            .collect();
        fft::coefficients(&windowed, &shape)
    });
    let partial = par::map_range(field.nt, |it| {
        let mut idx = vec![0usize; shape.len()];
        let mut eta = vec![0.0; shape.len()];
        let mut zr = vec![0.0; nc];
        let mut zi = vec![0.0; nc];
        let mut acc = 0.0;
        for r in 0..slab {
            let p = it * slab + r;
            fft::unravel(p, &shape, &mut idx);
            eta[0] = 2.0 * PI * fft::wavenumber(idx[0], field.nt) as f64 / field.t_len;
            for a in 1..shape.len() {
                eta[a] = 2.0 * PI * fft::wavenumber(idx[a], field.nx) as f64;
            }
            let e2: f64 = eta.iter().map(|x| x * x).sum();
            if e2 == 0.0 {
                continue;
            }
            for c in 0..nc {
                zr[c] = coeffs[c][p].re;
                zi[c] = coeffs[c][p].im;
            }
            let ar = op.apply(&eta, &zr);
            let ai = op.apply(&eta, &zi);
            let num: f64 = ar.iter().chain(&ai).map(|x| x * x).sum();
            acc += num / e2;
        }
        acc
    });
    let sum: f64 = partial.iter().sum();
    Ok((field.t_len * sum).sqrt())
}

/// One-variable periodic profile (period 1, mean zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    Sine,
    Cosine,
    /// `tanh(beta sin 2 pi s) / tanh(beta)`: odd, sup-norm 1, approaches a
    /// square wave as `beta` grows.
    Sharpened { beta: f64 },
}

impl Profile {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Profile::Sine => (2.0 * PI * s).sin(),
            Profile::Cosine => (2.0 * PI * s).cos(),
            Profile::Sharpened { beta } => (beta * (2.0 * PI * s).sin()).tanh() / beta.tanh(),
        }
    }

    pub fn sup(&self) -> f64 {
        1.0
    }
}

/// Physical frequency of integer spacetime wavenumber `k` on
/// `(0, t_len) x T^d`, up to the common factor `2 pi`.
pub fn physical_frequency(k: &[i64], t_len: f64) -> Vec<f64> {
    let mut eta: Vec<f64> = k.iter().map(|&x| x as f64).collect();
    eta[0] /= t_len;
    eta
}

/// `z(t, x) = amp * profile(k_t t / t_len + k . x)`, without any kernel check.
pub fn single_mode_field(
    d: usize,
    k: &[i64],
    amp: &[f64],
    profile: Profile,
    nt: usize,
    nx: usize,
    t_len: f64,
) -> Result<SpacetimeField> {
    if k.len() != d + 1 {
        return Err(Error::DimensionMismatch {
            expected: d + 1,
            got: k.len(),
        });
    }
    if amp.len() != relaxed_dim(d) {
        return Err(Error::DimensionMismatch {
            expected: relaxed_dim(d),
            got: amp.len(),
        });
    }
    let mut field = SpacetimeField::zeros(d, nt, nx, t_len);
    let shape = field.shape();
    let pts = field.points();
    let mut idx = vec![0; shape.len()];
    for p in 0..pts {
        fft::unravel(p, &shape, &mut idx);
        let mut phase = k[0] as f64 * idx[0] as f64 / nt as f64;
        for a in 1..shape.len() {
            phase += k[a] as f64 * idx[a] as f64 / nx as f64;
        }
        let h = profile.eval(phase);
        for (c, a) in amp.iter().enumerate() {
            field.data[c * pts + p] = a * h;
        }
    }
    Ok(field)
}

/// Kernel plane wave `amp * profile(eta . (t, x))` for an integer spacetime
/// frequency; `amp` must lie in `ker A(eta)`.
pub fn plane_wave_field(
    d: usize,
    k: &[i64],
    amp: &[f64],
    profile: Profile,
    nt: usize,
    nx: usize,
    t_len: f64,
) -> Result<SpacetimeField> {
    if k.iter().all(|&x| x == 0) {
        return Err(Error::ZeroFrequency);
    }
    let op = OperatorAE::new(d)?;
    if k.len() != d + 1 {
        return Err(Error::DimensionMismatch {
            expected: d + 1,
            got: k.len(),
        });
    }
    let eta = physical_frequency(k, t_len);
    let an = amp.iter().map(|x| x * x).sum::<f64>().sqrt();
    let en = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = op.apply(&eta, amp);
    let residual = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if residual > 1e-10 * an.max(1e-300) * en {
        return Err(Error::NotInKernel { residual });
    }
    single_mode_field(d, k, amp, profile, nt, nx, t_len)
}
