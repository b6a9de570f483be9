//! Fluid states, physical parameters and the lifting maps.
//!
//! Relaxed states `z = (rho, m, M, Q)` are stored as flat vectors with the
//! frozen column order
//!
//! ```text
//! rho, m_1 .. m_d, M (row-major upper triangle without M_dd), Q
//! ```
//!
//! The trace-free block is stored through its independent components only;
//! the last diagonal entry is `M_dd = -(M_11 + .. + M_{d-1,d-1})`, so symmetry
//! and vanishing trace hold by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of a compressible run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Spatial dimension.
    pub d: usize,
    /// Adiabatic exponent, `> 1`.
    pub gamma: f64,
    /// Squared Mach number.
    pub eps: f64,
    /// Reference density of the incompressible limit.
    pub rho_bar: f64,
    /// Final time.
    pub t_final: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            d: 2,
            gamma: 2.0,
            eps: 1.0,
            rho_bar: 1.0,
            t_final: 1.0,
        }
    }
}

impl Params {
    pub fn new(d: usize, gamma: f64, eps: f64, rho_bar: f64, t_final: f64) -> Result<Self> {
        let p = Params {
            d,
            gamma,
            eps,
            rho_bar,
            t_final,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid("d", "spatial dimension must be at least 2"));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(Error::invalid("gamma", "adiabatic exponent must be > 1"));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid("eps", "must be > 0"));
        }
        if !(self.rho_bar > 0.0) || !self.rho_bar.is_finite() {
            return Err(Error::invalid("rho_bar", "must be > 0"));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::invalid("t_final", "must be > 0"));
        }
        Ok(())
    }

    /// Pressure law `rho^gamma / eps`.
    pub fn pressure(&self, rho: f64) -> f64 {
        rho.powf(self.gamma) / self.eps
    }

    /// Scaled pressure lift `(rho^gamma - rho_bar^gamma) / (eps rho_bar)`.
    pub fn lifted_pressure(&self, rho: f64) -> f64 {
        (rho.powf(self.gamma) - self.rho_bar.powf(self.gamma)) / (self.eps * self.rho_bar)
    }
}

/// Dimension of the relaxed state space for spatial dimension `d`.
pub fn relaxed_dim(d: usize) -> usize {
    1 + d + tracefree_len(d) + 1
}

/// Number of independent components of a trace-free symmetric `d x d` matrix.
pub fn tracefree_len(d: usize) -> usize {
    d * (d + 1) / 2 - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressibleState {
    pub rho: f64,
    pub u: Vec<f64>,
}

impl CompressibleState {
    pub fn new(rho: f64, u: Vec<f64>) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::NonPositiveDensity(rho));
        }
        Ok(CompressibleState { rho, u })
    }
}

/// State `(u, P)` of an augmented incompressible solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub u: Vec<f64>,
    pub p: f64,
}

impl AugmentedState {
    pub fn new(u: Vec<f64>, p: f64) -> Self {
        AugmentedState { u, p }
    }

    /// Flat `(u_1, .., u_d, P)` layout used by measures over `(u, P)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.u.clone();
        v.push(self.p);
        v
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let (u, p) = z.split_at(z.len() - 1);
        AugmentedState {
            u: u.to_vec(),
            p: p[0],
        }
    }
}

/// Symmetric trace-free matrix held through its independent components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFreeSym {
    d: usize,
    comps: Vec<f64>,
}

impl TraceFreeSym {
    pub fn zeros(d: usize) -> Self {
        TraceFreeSym {
            d,
            comps: vec![0.0; tracefree_len(d)],
        }
    }

    pub fn from_components(d: usize, comps: Vec<f64>) -> Result<Self> {
        if comps.len() != tracefree_len(d) {
            return Err(Error::DimensionMismatch {
                expected: tracefree_len(d),
                got: comps.len(),
            });
        }
        Ok(TraceFreeSym { d, comps })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[f64] {
        &self.comps
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        tracefree_entry(self.d, i, j)
            .iter()
            .map(|&(k, c)| c * self.comps[k])
            .sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.d)
            .map(|i| (0..self.d).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }
}

/// Entry `(i, j)` of a trace-free symmetric matrix as a combination of its
/// stored components: a list of `(component index, coefficient)`.
pub fn tracefree_entry(d: usize, i: usize, j: usize) -> Vec<(usize, f64)> {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    if i == d - 1 && j == d - 1 {
        return (0..d - 1).map(|k| (upper_index(d, k, k), -1.0)).collect();
    }
    vec![(upper_index(d, i, j), 1.0)]
}

// Row-major position of (i, j), i <= j, within the upper triangle.
fn upper_index(d: usize, i: usize, j: usize) -> usize {
    i * d - i * i.saturating_sub(1) / 2 + (j - i)
}

/// A point of the relaxed state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedState {
    d: usize,
    data: Vec<f64>,
}

impl RelaxedState {
    pub fn zeros(d: usize) -> Self {
        RelaxedState {
            d,
            data: vec![0.0; relaxed_dim(d)],
        }
    }

    pub fn from_vec(d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != relaxed_dim(d) {
            return Err(Error::DimensionMismatch {
                expected: relaxed_dim(d),
                got: data.len(),
            });
        }
        Ok(RelaxedState { d, data })
    }

    pub fn from_parts(rho: f64, m: &[f64], mm: &TraceFreeSym, q: f64) -> Result<Self> {
        let d = m.len();
        if mm.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mm.dim(),
            });
        }
        let mut data = Vec::with_capacity(relaxed_dim(d));
        data.push(rho);
        data.extend_from_slice(m);
        data.extend_from_slice(mm.components());
        data.push(q);
        Ok(RelaxedState { d, data })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn rho(&self) -> f64 {
        self.data[0]
    }

    pub fn m(&self) -> &[f64] {
        &self.data[1..=self.d]
    }

    pub fn tracefree(&self) -> TraceFreeSym {
        let start = 1 + self.d;
        TraceFreeSym {
            d: self.d,
            comps: self.data[start..start + tracefree_len(self.d)].to_vec(),
        }
    }

    pub fn q(&self) -> f64 {
        self.data[self.data.len() - 1]
    }

    pub fn sub(&self, other: &RelaxedState) -> RelaxedState {
        RelaxedState {
            d: self.d,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> RelaxedState {
        RelaxedState {
            d: self.d,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// `v ⊘ v = v ⊗ v - |v|^2/d Id`.
pub fn ocircle(v: &[f64]) -> Result<TraceFreeSym> {
    let d = v.len();
    if d < 2 {
        return Err(Error::invalid("d", "spatial dimension must be at least 2"));
    }
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let mut comps = Vec::with_capacity(tracefree_len(d));
    for i in 0..d {
        for j in i..d {
            if i == d - 1 && j == d - 1 {
                continue;
            }
            let diag = if i == j { norm2 / d as f64 } else { 0.0 };
            comps.push(v[i] * v[j] - diag);
        }
    }
    Ok(TraceFreeSym { d, comps })
}

/// Incompressible lift `S(u, P) = (1, u, u ⊘ u, P + |u|^2/d)`.
pub fn lift_s(s: &AugmentedState) -> Result<RelaxedState> {
    let d = s.u.len();
    let norm2: f64 = s.u.iter().map(|x| x * x).sum();
    RelaxedState::from_parts(1.0, &s.u, &ocircle(&s.u)?, s.p + norm2 / d as f64)
}

fn check_compressible(s: &CompressibleState, p: &Params) -> Result<()> {
    if !(s.rho > 0.0) {
        return Err(Error::NonPositiveDensity(s.rho));
    }
    if s.u.len() != p.d {
        return Err(Error::DimensionMismatch {
            expected: p.d,
            got: s.u.len(),
        });
    }
    Ok(())
}

fn momentum_lift(s: &CompressibleState, p: &Params, q_pressure: f64) -> Result<RelaxedState> {
    check_compressible(s, p)?;
    let d = p.d;
    let norm2: f64 = s.u.iter().map(|x| x * x).sum();
    let m: Vec<f64> = s.u.iter().map(|x| s.rho * x).collect();
    let oc = ocircle(&s.u)?;
    let mm = TraceFreeSym {
        d,
        comps: oc.comps.iter().map(|c| s.rho * c).collect(),
    };
    RelaxedState::from_parts(s.rho, &m, &mm, q_pressure + s.rho * norm2 / d as f64)
}

/// Compressible lift `Θ(rho, u) = (rho, rho u, rho u ⊘ u, rho^gamma/eps + rho |u|^2/d)`.
pub fn lift_theta(s: &CompressibleState, p: &Params) -> Result<RelaxedState> {
    check_compressible(s, p)?;
    momentum_lift(s, p, p.pressure(s.rho))
}

/// Reference-shifted compressible lift: `Θ` with `rho_bar^gamma/eps` removed
/// from the `Q` slot.
pub fn lift_c(s: &CompressibleState, p: &Params) -> Result<RelaxedState> {
    check_compressible(s, p)?;
    let shifted = (s.rho.powf(p.gamma) - p.rho_bar.powf(p.gamma)) / p.eps;
    momentum_lift(s, p, shifted)
}

/// Output of [`lift_t`]: density, velocity and scaled pressure.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureLiftTriple {
    pub rho: f64,
    pub u: Vec<f64>,
    pub p: f64,
}

pub fn lift_t(s: &CompressibleState, p: &Params) -> Result<PressureLiftTriple> {
    check_compressible(s, p)?;
    Ok(PressureLiftTriple {
        rho: s.rho,
        u: s.u.clone(),
        p: p.lifted_pressure(s.rho),
    })
}

/// Pressure lift `(rho, u) -> (u, (rho^gamma - rho_bar^gamma)/(eps rho_bar))`.
pub fn lift_p(s: &CompressibleState, p: &Params) -> Result<AugmentedState> {
    let t = lift_t(s, p)?;
    Ok(AugmentedState { u: t.u, p: t.p })
}

/// Recover `(u, P)` from a state with unit density slot; errors if the
/// state is not of the form `S(u, P)` within `tol` (relative).
pub fn unlift_s(z: &RelaxedState, tol: f64) -> Result<AugmentedState> {
    let d = z.dim();
    let scale = 1.0 + z.norm();
    if (z.rho() - 1.0).abs() > tol * scale {
        return Err(Error::NotLifted(format!("density slot {} != 1", z.rho())));
    }
    let u = z.m().to_vec();
    let oc = ocircle(&u)?;
    let dev = oc
        .components()
        .iter()
        .zip(z.tracefree().components())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if dev > tol * scale * scale {
        return Err(Error::NotLifted(format!(
            "tensor slot deviates from u ⊘ u by {dev:e}"
        )));
    }
    let norm2: f64 = u.iter().map(|x| x * x).sum();
    Ok(AugmentedState {
        p: z.q() - norm2 / d as f64,
        u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p2(gamma: f64, eps: f64, rho_bar: f64) -> Params {
        Params::new(2, gamma, eps, rho_bar, 1.0).unwrap()
    }

    #[test]
    fn tracefree_layout_d2_and_d3() {
        let m = TraceFreeSym::from_components(2, vec![0.3, -0.7]).unwrap();
        assert_eq!(m.to_dense(), vec![vec![0.3, -0.7], vec![-0.7, -0.3]]);
        assert_eq!(relaxed_dim(2), 6);
        assert_eq!(relaxed_dim(3), 10);

        // d = 3 stored as (M11, M12, M13, M22, M23)
        let m = TraceFreeSym::from_components(3, vec![1., 2., 3., 4., 5.]).unwrap();
        let dense = m.to_dense();
        assert_eq!(dense[0], vec![1., 2., 3.]);
        assert_eq!(dense[1], vec![2., 4., 5.]);
        assert_eq!(dense[2], vec![3., 5., -5.]);
        assert_eq!(m.trace(), 0.0);
    }

    #[test]
    fn ocircle_examples() {
        assert_eq!(ocircle(&[0.0, 0.0]).unwrap().to_dense(), vec![vec![0.0; 2]; 2]);
        assert_eq!(
            ocircle(&[1.0, 0.0]).unwrap().to_dense(),
            vec![vec![0.5, 0.0], vec![0.0, -0.5]]
        );
        assert_eq!(
            ocircle(&[1.0, 1.0]).unwrap().to_dense(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]]
        );
        assert!(ocircle(&[1.0]).is_err());
    }

    #[test]
    fn lift_s_examples() {
        let z = lift_s(&AugmentedState::new(vec![0.0, 0.0], 0.0)).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let z = lift_s(&AugmentedState::new(vec![1.0, 0.0], 1.0)).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 1.0, 0.0, 0.5, 0.0, 1.5]);
        let z = lift_s(&AugmentedState::new(vec![0.0, 1.0], -0.5)).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0, 1.0, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn lift_theta_examples() {
        let p = p2(2.0, 1.0, 1.0);
        let z = lift_theta(&CompressibleState::new(1.0, vec![0.0, 0.0]).unwrap(), &p).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let z = lift_theta(&CompressibleState::new(3.7, vec![0.0, 0.0]).unwrap(), &p).unwrap();
        assert_eq!(z.m(), &[0.0, 0.0]);
        assert_eq!(z.tracefree().components(), &[0.0, 0.0]);

        let p = p2(2.0, 0.5, 1.0);
        let z = lift_theta(&CompressibleState::new(1.0, vec![1.0, 0.0]).unwrap(), &p).unwrap();
        assert_relative_eq!(z.q(), 2.5, epsilon = 1e-15);

        let bad = CompressibleState {
            rho: 0.0,
            u: vec![0.0, 0.0],
        };
        assert!(matches!(lift_theta(&bad, &p), Err(Error::NonPositiveDensity(_))));
        let wrong_dim = CompressibleState {
            rho: 1.0,
            u: vec![0.0; 3],
        };
        assert!(matches!(
            lift_theta(&wrong_dim, &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lift_c_examples() {
        let p = p2(2.0, 0.01, 1.0);
        let z = lift_c(&CompressibleState::new(1.0, vec![0.0, 0.0]).unwrap(), &p).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let z = lift_c(&CompressibleState::new(1.1, vec![0.0, 0.0]).unwrap(), &p).unwrap();
        assert_relative_eq!(z.q(), 21.0, max_relative = 1e-12);

        let s = CompressibleState::new(1.3, vec![0.4, -0.2]).unwrap();
        let a = lift_theta(&s, &p).unwrap();
        let b = lift_c(&s, &p).unwrap();
        let diff = a.sub(&b);
        assert_eq!(&diff.as_slice()[..5], &[0.0; 5]);
        assert_relative_eq!(diff.q(), 1.0 / 0.01, max_relative = 1e-12);
    }

    #[test]
    fn lift_t_and_lift_p_examples() {
        let p = p2(2.0, 0.01, 1.0);
        let t = lift_t(&CompressibleState::new(1.0, vec![0.3, 0.1]).unwrap(), &p).unwrap();
        assert_eq!(t.p, 0.0);
        let t = lift_t(&CompressibleState::new(1.1, vec![1.0, 0.0]).unwrap(), &p).unwrap();
        assert_relative_eq!(t.p, 21.0, max_relative = 1e-12);

        let s = CompressibleState::new(1.1, vec![0.0, 0.0]).unwrap();
        let c = lift_c(&s, &p).unwrap();
        let t = lift_t(&s, &p).unwrap();
        assert_relative_eq!(t.p, c.q() / p.rho_bar, max_relative = 1e-14);

        let s = CompressibleState::new(1.1, vec![1.0, 0.0]).unwrap();
        let ps = lift_p(&s, &p).unwrap();
        let t = lift_t(&s, &p).unwrap();
        assert_eq!(ps.u, vec![1.0, 0.0]);
        assert_relative_eq!(ps.p, 21.0, max_relative = 1e-12);
        assert_eq!((ps.u.clone(), ps.p), (t.u, t.p));

        let rest = lift_p(&CompressibleState::new(1.0, vec![2.0, -1.0]).unwrap(), &p).unwrap();
        assert_eq!(rest, AugmentedState::new(vec![2.0, -1.0], 0.0));
    }

    #[test]
    fn unlift_inverts_lift_s() {
        let s = AugmentedState::new(vec![0.7, -1.2], 0.4);
        let back = unlift_s(&lift_s(&s).unwrap(), 1e-12).unwrap();
        assert_relative_eq!(back.p, s.p, epsilon = 1e-14);
        assert_eq!(back.u, s.u);
        let not_lifted = RelaxedState::from_vec(2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(unlift_s(&not_lifted, 1e-12).is_err());
    }

    proptest! {
        #[test]
        fn ocircle_is_tracefree_and_symmetric(v in prop::collection::vec(-5.0f64..5.0, 2..5)) {
            let m = ocircle(&v).unwrap();
            let dense = m.to_dense();
            let d = v.len();
            let norm2: f64 = v.iter().map(|x| x * x).sum();
            for i in 0..d {
                for j in 0..d {
                    prop_assert_eq!(dense[i][j], dense[j][i]);
                    let expect = v[i] * v[j] - if i == j { norm2 / d as f64 } else { 0.0 };
                    prop_assert!((dense[i][j] - expect).abs() <= 1e-12 * (1.0 + norm2));
                }
            }
            // the trace vanishes by the storage layout, up to the rounding of
            // the stored diagonal entries
            prop_assert!(m.trace().abs() <= 1e-13 * (1.0 + norm2));
        }

        #[test]
        fn reference_density_consistency(
            u in prop::collection::vec(-3.0f64..3.0, 2),
            rho_bar in 0.2f64..3.0,
            eps in 1e-4f64..1.0,
            gamma in 1.1f64..3.0,
        ) {
            let p = Params::new(2, gamma, eps, rho_bar, 1.0).unwrap();
            let s = CompressibleState::new(rho_bar, u).unwrap();
            let a = lift_s(&lift_p(&s, &p).unwrap()).unwrap();
            let c = lift_c(&s, &p).unwrap().scale(1.0 / rho_bar);
            for (x, y) in a.as_slice().iter().zip(c.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn lift_s_locally_lipschitz(
            u1 in prop::collection::vec(-2.0f64..2.0, 2),
            u2 in prop::collection::vec(-2.0f64..2.0, 2),
            p1 in -2.0f64..2.0,
            p2 in -2.0f64..2.0,
        ) {
            // |d/du (u ⊘ u)| <= 2|u| and the Q slot adds 2|u|/d, so on the
            // ball of radius R = 2 sqrt(3) the lift is Lipschitz with L <= 1 + 3R.
            let r = 2.0 * 3f64.sqrt();
            let lip = 1.0 + 3.0 * r;
            let a = lift_s(&AugmentedState::new(u1.clone(), p1)).unwrap();
            let b = lift_s(&AugmentedState::new(u2.clone(), p2)).unwrap();
            let dz = a.sub(&b).norm();
            let ds = ((u1[0]-u2[0]).powi(2) + (u1[1]-u2[1]).powi(2) + (p1-p2).powi(2)).sqrt();
            prop_assert!(dz <= lip * ds + 1e-12);
        }
    }
}
