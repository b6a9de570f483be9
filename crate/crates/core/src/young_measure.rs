//! Finitely supported Young measures on spacetime grids.
//!
//! Every cell of a [`YoungMeasure`] carries an [`AtomicMeasure`], so pairings
//! and pushforwards are exact finite sums. Atoms closer than
//! [`MERGE_TOL`] (max-norm) are merged.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;
use crate::par;

pub const MERGE_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    dim: usize,
    atoms: Vec<Atom>,
}

impl AtomicMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(Error::InvalidMeasure("no atoms".into()));
        };
        let dim = first.point.len();
        let mut total = 0.0;
        for a in &atoms {
            if a.point.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: a.point.len(),
                });
            }
            if !(a.weight > 0.0) || !a.weight.is_finite() {
                return Err(Error::InvalidMeasure(format!("weight {} not positive", a.weight)));
            }
            if a.point.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL * atoms.len().max(1) as f64 {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self::merged(dim, atoms))
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        AtomicMeasure {
            dim: point.len(),
            atoms: vec![Atom { weight: 1.0, point }],
        }
    }

    /// Uniform measure over the given samples (duplicates merge).
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / points.len() as f64;
        Self::new(points.into_iter().map(|point| Atom { weight: w, point }).collect())
    }

    fn merged(dim: usize, atoms: Vec<Atom>) -> Self {
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match out.iter_mut().find(|b| {
                b.point
                    .iter()
                    .zip(&a.point)
                    .all(|(x, y)| (x - y).abs() <= MERGE_TOL)
            }) {
                Some(b) => b.weight += a.weight,
                None => out.push(a),
            }
        }
        AtomicMeasure { dim, atoms: out }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// `<nu, f> = sum_i w_i f(x_i)`.
    pub fn pair(&self, f: &TestFunction) -> Result<f64> {
        if let Some(k) = f.dim {
            if k != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: self.dim,
                });
            }
        }
        Ok(self.pair_with(|z| f.eval(z)))
    }

    pub fn pair_with<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(&a.point)).sum()
    }

    pub fn barycenter(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        for a in &self.atoms {
            for (x, y) in b.iter_mut().zip(&a.point) {
                *x += a.weight * y;
            }
        }
        b
    }

    /// Largest Euclidean norm among the atoms.
    pub fn support_radius(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.point.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `g_# nu`: atoms moved through `g`, weights kept, coincident images merged.
    pub fn pushforward<G: Fn(&[f64]) -> Vec<f64>>(&self, g: G) -> Result<AtomicMeasure> {
        let atoms: Vec<Atom> = self
            .atoms
            .iter()
            .map(|a| Atom {
                weight: a.weight,
                point: g(&a.point),
            })
            .collect();
        let dim = atoms[0].point.len();
        if atoms.iter().any(|a| a.point.len() != dim) {
            return Err(Error::InvalidMeasure("pushforward map changes dimension".into()));
        }
        Ok(Self::merged(dim, atoms))
    }

    /// Product with a Dirac at `p`: `nu ⊗ delta_p`.
    pub fn tensor_dirac(&self, p: &[f64]) -> AtomicMeasure {
        AtomicMeasure {
            dim: self.dim + p.len(),
            atoms: self
                .atoms
                .iter()
                .map(|a| {
                    let mut point = a.point.clone();
                    point.extend_from_slice(p);
                    Atom {
                        weight: a.weight,
                        point,
                    }
                })
                .collect(),
        }
    }
}

type TestFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A continuous test function with an `L^inf` bound on a declared ball.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub dim: Option<usize>,
    pub radius: f64,
    pub bound: f64,
    f: TestFn,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("radius", &self.radius)
            .field("bound", &self.bound)
            .finish()
    }
}

impl TestFunction {
    pub fn new<F>(name: impl Into<String>, dim: Option<usize>, radius: f64, bound: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        TestFunction {
            name: name.into(),
            dim,
            radius,
            bound,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        (self.f)(z)
    }

    /// Coordinate function `z -> z_i` (bound on the ball of radius `radius`).
    pub fn coordinate(dim: usize, i: usize, radius: f64) -> Self {
        TestFunction::new(format!("z{i}"), Some(dim), radius, radius, move |z| z[i])
    }
}

#[derive(Debug, Clone)]
pub struct TestDictionary {
    pub entries: Vec<TestFunction>,
}

impl TestDictionary {
    pub fn new(entries: Vec<TestFunction>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        Ok(TestDictionary { entries })
    }

    /// Monomials of total degree <= 4 times the C^1 radial cutoff
    /// `(1 - |z|^2/R^2)^2` on the ball of radius `r_dict`.
    pub fn default_for(dim: usize, r_dict: f64) -> Self {
        let mut entries = Vec::new();
        let mut exps = vec![0usize; dim];
        monomial_exponents(dim, 4, 0, &mut exps, &mut |e| {
            let e = e.to_vec();
            let deg: usize = e.iter().sum();
            let name = format!(
                "mono[{}]",
                e.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            );
            let r = r_dict;
            entries.push(TestFunction::new(name, Some(dim), r, r.powi(deg as i32), move |z| {
                let r2: f64 = z.iter().map(|x| x * x).sum::<f64>() / (r * r);
                if r2 >= 1.0 {
                    return 0.0;
                }
                let mono: f64 = z.iter().zip(&e).map(|(x, &k)| x.powi(k as i32)).product();
                mono * (1.0 - r2) * (1.0 - r2)
            }));
        });
        TestDictionary { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn monomial_exponents(
    dim: usize,
    max_deg: usize,
    axis: usize,
    exps: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if axis == dim {
        visit(exps);
        return;
    }
    let used: usize = exps[..axis].iter().sum();
    for k in 0..=(max_deg - used) {
        exps[axis] = k;
        monomial_exponents(dim, max_deg, axis + 1, exps, visit);
    }
    exps[axis] = 0;
}

/// Regular cell layout of `(0, t_final) x T^d`: `nt` time slabs and `nx`
/// cells per space axis, row-major `[t][x_1]..[x_d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeGrid {
    pub d: usize,
    pub nt: usize,
    pub nx: usize,
    pub t_final: f64,
}

impl SpacetimeGrid {
    pub fn cells(&self) -> usize {
        self.nt * self.nx.pow(self.d as u32)
    }

    pub fn spatial_cells(&self) -> usize {
        self.nx.pow(self.d as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        (self.t_final / self.nt as f64) * (1.0 / self.nx as f64).powi(self.d as i32)
    }

    /// Cell-center coordinates `(t, x_1, .., x_d)`.
    pub fn center(&self, cell: usize) -> Vec<f64> {
        let sc = self.spatial_cells();
        let it = cell / sc;
        let mut idx = vec![0; self.d];
        fft::unravel(cell % sc, &vec![self.nx; self.d], &mut idx);
        let mut c = vec![(it as f64 + 0.5) * self.t_final / self.nt as f64];
        c.extend(idx.iter().map(|&i| (i as f64 + 0.5) / self.nx as f64));
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoungMeasure {
    pub grid: SpacetimeGrid,
    pub dim: usize,
    pub cells: Vec<AtomicMeasure>,
}

pub const YOUNG_MEASURE_SCHEMA: &str = "lowmach.young_measure/1";

#[derive(Serialize, Deserialize)]
struct YoungMeasureDoc {
    schema: String,
    #[serde(flatten)]
    measure: YoungMeasure,
}

impl YoungMeasure {
    pub fn new(grid: SpacetimeGrid, cells: Vec<AtomicMeasure>) -> Result<Self> {
        if cells.len() != grid.cells() {
            return Err(Error::InvalidMeasure(format!(
                "grid has {} cells, got {} measures",
                grid.cells(),
                cells.len()
            )));
        }
        let dim = cells.first().map(|c| c.dim()).unwrap_or(0);
        for c in &cells {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.dim(),
                });
            }
        }
        Ok(YoungMeasure { grid, dim, cells })
    }

    /// The same measure in every cell.
    pub fn constant(grid: SpacetimeGrid, nu: AtomicMeasure) -> Self {
        YoungMeasure {
            dim: nu.dim(),
            cells: vec![nu; grid.cells()],
            grid,
        }
    }

    pub fn map_cells<F>(&self, f: F) -> Result<YoungMeasure>
    where
        F: Fn(&AtomicMeasure) -> Result<AtomicMeasure> + Sync + Send,
    {
        let cells: Vec<AtomicMeasure> = par::map_slice(&self.cells, f)
            .into_iter()
            .collect::<Result<_>>()?;
        YoungMeasure::new(self.grid, cells)
    }

    /// Per-cell pairing `<nu_(t,x), f>`.
    pub fn pair_field(&self, f: &TestFunction) -> Result<Vec<f64>> {
        par::map_slice(&self.cells, |c| c.pair(f))
            .into_iter()
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = YoungMeasureDoc {
            schema: YOUNG_MEASURE_SCHEMA.into(),
            measure: self.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: YoungMeasureDoc = serde_json::from_str(s)?;
        if doc.schema != YOUNG_MEASURE_SCHEMA {
            return Err(Error::InvalidMeasure(format!("unknown schema {}", doc.schema)));
        }
        let m = doc.measure;
        let cells = m
            .cells
            .into_iter()
            .map(|c| AtomicMeasure::new(c.atoms))
            .collect::<Result<Vec<_>>>()?;
        let out = YoungMeasure::new(m.grid, cells)?;
        if out.dim != m.dim {
            return Err(Error::DimensionMismatch {
                expected: m.dim,
                got: out.dim,
            });
        }
        Ok(out)
    }
}

/// Project a measure over `(u, P)` onto its velocity marginal.
pub fn project_u(mu: &YoungMeasure) -> Result<YoungMeasure> {
    if mu.dim < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: mu.dim,
        });
    }
    let k = mu.dim - 1;
    mu.map_cells(|c| c.pushforward(|z| z[..k].to_vec()))
}

/// `nu ⊗ delta_{P(t,x)}` cell by cell.
pub fn extend_with_pressure(nu: &YoungMeasure, pfield: &[f64]) -> Result<YoungMeasure> {
    if pfield.len() != nu.cells.len() {
        return Err(Error::DimensionMismatch {
            expected: nu.cells.len(),
            got: pfield.len(),
        });
    }
    let cells = nu
        .cells
        .iter()
        .zip(pfield)
        .map(|(c, p)| c.tensor_dirac(&[*p]))
        .collect();
    YoungMeasure::new(nu.grid, cells)
}

/// A field of symmetric `d x d` matrices on the periodic grid `nx^d`, e.g.
/// the second moment `<nu, u ⊗ u>`. `entries[i * d + j]` holds the `(i, j)`
/// component at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub d: usize,
    pub nx: usize,
    pub entries: Vec<Vec<f64>>,
}

impl MatrixField {
    pub fn from_velocity(d: usize, nx: usize, u: &[Vec<f64>]) -> Self {
        let mut entries = vec![vec![0.0; u.len()]; d * d];
        for (p, v) in u.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    entries[i * d + j][p] = v[i] * v[j];
                }
            }
        }
        MatrixField { d, nx, entries }
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.nx; self.d]
    }
}

fn spatial_wavevectors(d: usize, nx: usize) -> Vec<(Vec<f64>, bool)> {
    let shape = vec![nx; d];
    let total = nx.pow(d as u32);
    let mut idx = vec![0; d];
    (0..total)
        .map(|p| {
            fft::unravel(p, &shape, &mut idx);
            let nyquist = idx.iter().any(|&i| nx % 2 == 0 && i == nx / 2);
            let k = idx
                .iter()
                .map(|&i| 2.0 * PI * fft::wavenumber(i, nx) as f64)
                .collect();
            (k, nyquist)
        })
        .collect()
}

/// Spectral `div div S` (Nyquist modes dropped).
pub fn div_div(s: &MatrixField) -> Vec<f64> {
    let shape = s.shape();
    let d = s.d;
    let hats: Vec<Vec<Complex64>> = s.entries.iter().map(|e| fft::coefficients(e, &shape)).collect();
    let ks = spatial_wavevectors(d, s.nx);
    let out: Vec<Complex64> = ks
        .iter()
        .enumerate()
        .map(|(p, (k, nyq))| {
            if *nyq {
                return Complex64::new(0.0, 0.0);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..d {
                for j in 0..d {
                    acc -= hats[i * d + j][p] * (k[i] * k[j]);
                }
            }
            acc
        })
        .collect();
    fft::synthesize(&out, &shape)
}

/// Spectral `-Laplace P` (Nyquist modes dropped).
pub fn neg_laplacian(p: &[f64], d: usize, nx: usize) -> Vec<f64> {
    let shape = vec![nx; d];
    let hat = fft::coefficients(p, &shape);
    let ks = spatial_wavevectors(d, nx);
    let out: Vec<Complex64> = ks
        .iter()
        .zip(&hat)
        .map(|((k, nyq), c)| {
            if *nyq {
                Complex64::new(0.0, 0.0)
            } else {
                c * k.iter().map(|x| x * x).sum::<f64>()
            }
        })
        .collect();
    fft::synthesize(&out, &shape)
}

/// Average-free solution of `-Laplace P = div div S` on the periodic grid.
pub fn pressure_from_velocity(second_moment: &MatrixField) -> Result<Vec<f64>> {
    let d = second_moment.d;
    let nx = second_moment.nx;
    if second_moment.entries.len() != d * d
        || second_moment.entries.iter().any(|e| e.len() != nx.pow(d as u32))
    {
        return Err(Error::DimensionMismatch {
            expected: d * d * nx.pow(d as u32),
            got: second_moment.entries.iter().map(|e| e.len()).sum(),
        });
    }
    let shape = second_moment.shape();
    let hats: Vec<Vec<Complex64>> = second_moment
        .entries
        .iter()
        .map(|e| fft::coefficients(e, &shape))
        .collect();
    let ks = spatial_wavevectors(d, nx);
    let out: Vec<Complex64> = ks
        .iter()
        .enumerate()
        .map(|(p, (k, nyq))| {
            let k2: f64 = k.iter().map(|x| x * x).sum();
            if *nyq || k2 == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..d {
                for j in 0..d {
                    acc -= hats[i * d + j][p] * (k[i] * k[j]);
                }
            }
            acc / k2
        })
        .collect();
    Ok(fft::synthesize(&out, &shape))
}

/// Window family for [`ym_distance`]: trigonometric tensor modes with
/// `|k_i| <= kmax` in space, times either 1 or the C^1 bump
/// `(1 + cos(pi t / T)) / 2`, which vanishes to first order at `t = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFamily {
    pub kmax: i64,
}

impl Default for WindowFamily {
    fn default() -> Self {
        WindowFamily { kmax: 4 }
    }
}

pub fn time_bump(t: f64, t_final: f64) -> f64 {
    0.5 * (1.0 + (PI * t / t_final).cos())
}

pub fn time_bump_derivative(t: f64, t_final: f64) -> f64 {
    -0.5 * PI / t_final * (PI * t / t_final).sin()
}

/// Spatial wavevectors with `|k_i| <= kmax`, one representative of each
/// `+-k` pair (plus `k = 0`).
pub fn half_space_modes(d: usize, kmax: i64) -> Vec<Vec<i64>> {
    let side = (2 * kmax + 1) as usize;
    let total = side.pow(d as u32);
    let mut idx = vec![0; d];
    let mut out = Vec::new();
    for p in 0..total {
        fft::unravel(p, &vec![side; d], &mut idx);
        let k: Vec<i64> = idx.iter().map(|&i| i as i64 - kmax).collect();
        // keep k if its first nonzero entry is positive, or k = 0
        match k.iter().find(|&&x| x != 0) {
            None => out.push(k),
            Some(&x) if x > 0 => out.push(k),
            _ => {}
        }
    }
    out
}

/// Finite-dictionary surrogate for weak-* distance of Young measures:
/// `max_{f, phi} | ∫∫ phi (<nu1, f> - <nu2, f>) dx dt |`.
pub fn ym_distance(
    nu1: &YoungMeasure,
    nu2: &YoungMeasure,
    dict: &TestDictionary,
    windows: &WindowFamily,
) -> Result<f64> {
    if nu1.grid != nu2.grid {
        return Err(Error::InvalidMeasure("measures live on different grids".into()));
    }
    if nu1.dim != nu2.dim {
        return Err(Error::DimensionMismatch {
            expected: nu1.dim,
            got: nu2.dim,
        });
    }
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let grid = nu1.grid;
    let diffs: Vec<Vec<f64>> = dict
        .entries
        .iter()
        .map(|f| {
            let a = nu1.pair_field(f)?;
            let b = nu2.pair_field(f)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<_>>()?;
    Ok(window_sup(&grid, &diffs, windows))
}

/// `max` over windows and rows of `|∫∫ phi g|` for per-cell fields `g`.
pub(crate) fn window_sup(grid: &SpacetimeGrid, fields: &[Vec<f64>], windows: &WindowFamily) -> f64 {
    let d = grid.d;
    let modes = half_space_modes(d, windows.kmax);
    let sc = grid.spatial_cells();
    let vol = grid.cell_volume();
    // per-axis phase table e^{-2 pi i k x_j}
    let kspan = 2 * windows.kmax + 1;
    let phase: Vec<Vec<Complex64>> = (0..kspan)
        .map(|ki| {
            let k = ki - windows.kmax;
            (0..grid.nx)
                .map(|j| {
                    let x = (j as f64 + 0.5) / grid.nx as f64;
                    Complex64::from_polar(1.0, -2.0 * PI * k as f64 * x)
                })
                .collect()
        })
        .collect();
    let times: Vec<(f64, f64)> = (0..grid.nt)
        .map(|it| {
            let t = (it as f64 + 0.5) * grid.t_final / grid.nt as f64;
            (1.0, time_bump(t, grid.t_final))
        })
        .collect();
    let per_field = par::map_slice(fields, |g| {
        // time-integrated spatial fields for both time factors
        let mut flat = vec![0.0; sc];
        let mut bumped = vec![0.0; sc];
        for (it, (w0, w1)) in times.iter().enumerate() {
            for s in 0..sc {
                let v = g[it * sc + s];
                flat[s] += w0 * v;
                bumped[s] += w1 * v;
            }
        }
        let mut best: f64 = 0.0;
        let mut idx = vec![0; d];
        for k in &modes {
            let mut s0 = Complex64::new(0.0, 0.0);
            let mut s1 = Complex64::new(0.0, 0.0);
            for s in 0..sc {
                fft::unravel(s, &vec![grid.nx; d], &mut idx);
                let mut e = Complex64::new(1.0, 0.0);
                for a in 0..d {
                    e *= phase[(k[a] + windows.kmax) as usize][idx[a]];
                }
                s0 += e * flat[s];
                s1 += e * bumped[s];
            }
            for s in [s0, s1] {
                // cos window -> Re, sin window -> -Im
                best = best.max(s.re.abs()).max(s.im.abs());
            }
        }
        best * vol
    });
    per_field.into_iter().fold(0.0, f64::max)
}

/// A spacetime sample field with `dim` components per point, point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub grid: SpacetimeGrid,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SampledField {
    pub fn point(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Empirical Young measure: each coarse cell holds the uniform measure over
/// the fine samples it contains. `coarsen` acts on space, `coarsen_t` on time.
pub fn empirical_from_field(
    field: &SampledField,
    coarsen: usize,
    coarsen_t: usize,
) -> Result<YoungMeasure> {
    let g = field.grid;
    if coarsen == 0 || g.nx % coarsen != 0 {
        return Err(Error::IndivisibleCoarsening {
            factor: coarsen,
            len: g.nx,
        });
    }
    if coarsen_t == 0 || g.nt % coarsen_t != 0 {
        return Err(Error::IndivisibleCoarsening {
            factor: coarsen_t,
            len: g.nt,
        });
    }
    if field.data.len() != g.cells() * field.dim {
        return Err(Error::DimensionMismatch {
            expected: g.cells() * field.dim,
            got: field.data.len(),
        });
    }
    let coarse = SpacetimeGrid {
        d: g.d,
        nt: g.nt / coarsen_t,
        nx: g.nx / coarsen,
        t_final: g.t_final,
    };
    let csc = coarse.spatial_cells();
    let fsc = g.spatial_cells();
    let block = coarsen.pow(g.d as u32);
    let cells = par::map_range(coarse.cells(), |cell| {
        let ct = cell / csc;
        let mut cidx = vec![0; g.d];
        fft::unravel(cell % csc, &vec![coarse.nx; g.d], &mut cidx);
        let mut points = Vec::with_capacity(block * coarsen_t);
        let mut off = vec![0; g.d];
        for dt in 0..coarsen_t {
            let ft = ct * coarsen_t + dt;
            for b in 0..block {
                fft::unravel(b, &vec![coarsen; g.d], &mut off);
                let mut flat = 0;
                for a in 0..g.d {
                    flat = flat * g.nx + cidx[a] * coarsen + off[a];
                }
                points.push(field.point(ft * fsc + flat).to_vec());
            }
        }
        AtomicMeasure::uniform(points)
    });
    YoungMeasure::new(coarse, cells.into_iter().collect::<Result<_>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::{lift_p, CompressibleState, Params};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn atom(w: f64, p: &[f64]) -> Atom {
        Atom {
            weight: w,
            point: p.to_vec(),
        }
    }

    fn grid(nt: usize, nx: usize) -> SpacetimeGrid {
        SpacetimeGrid {
            d: 2,
            nt,
            nx,
            t_final: 0.5,
        }
    }

    #[test]
    fn pairing_examples() {
        let z = [0.3, -1.0, 2.0];
        let id0 = TestFunction::coordinate(3, 0, 10.0);
        let id2 = TestFunction::coordinate(3, 2, 10.0);
        let d = AtomicMeasure::dirac(z.to_vec());
        assert_eq!(d.pair(&id0).unwrap(), 0.3);
        assert_eq!(d.pair(&id2).unwrap(), 2.0);

        let sym = AtomicMeasure::new(vec![atom(0.5, &[1.0, 2.0]), atom(0.5, &[-1.0, -2.0])]).unwrap();
        assert_eq!(sym.barycenter(), vec![0.0, 0.0]);

        let sq = TestFunction::new("x^2", Some(1), 10.0, 100.0, |z| z[0] * z[0]);
        let m = AtomicMeasure::new(vec![atom(0.5, &[1.0]), atom(0.5, &[3.0])]).unwrap();
        assert_eq!(m.pair(&sq).unwrap(), 5.0);
        assert!(matches!(m.pair(&id0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn measure_validation() {
        assert!(AtomicMeasure::new(vec![]).is_err());
        assert!(AtomicMeasure::new(vec![atom(0.5, &[1.0])]).is_err());
        assert!(AtomicMeasure::new(vec![atom(1.5, &[1.0]), atom(-0.5, &[0.0])]).is_err());
        assert!(AtomicMeasure::new(vec![atom(0.5, &[1.0]), atom(0.5, &[1.0, 2.0])]).is_err());
        let merged = AtomicMeasure::new(vec![atom(0.25, &[1.0]), atom(0.75, &[1.0 + 1e-14])]).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.total_weight(), 1.0);
    }

    #[test]
    fn pushforward_examples() {
        let m = AtomicMeasure::new(vec![atom(0.3, &[1.0, 2.0]), atom(0.7, &[-1.0, 0.5])]).unwrap();
        assert_eq!(m.pushforward(|z| z.to_vec()).unwrap(), m);

        let p = Params::new(2, 2.0, 0.01, 1.0, 1.0).unwrap();
        let nu = AtomicMeasure::new(vec![atom(0.5, &[1.0, 0.3, -0.2]), atom(0.5, &[1.0, -1.0, 0.4])])
            .unwrap();
        let lifted = nu
            .pushforward(|z| {
                lift_p(&CompressibleState::new(z[0], z[1..].to_vec()).unwrap(), &p)
                    .unwrap()
                    .to_vec()
            })
            .unwrap();
        let expect =
            AtomicMeasure::new(vec![atom(0.5, &[0.3, -0.2, 0.0]), atom(0.5, &[-1.0, 0.4, 0.0])]).unwrap();
        assert_eq!(lifted, expect);
    }

    #[test]
    fn projection_and_extension() {
        let g = grid(2, 2);
        let cell = AtomicMeasure::new(vec![atom(0.5, &[1.0, 2.0, 1.0]), atom(0.5, &[1.0, 2.0, 2.0])]).unwrap();
        let mu = YoungMeasure::constant(g, cell);
        let pu = project_u(&mu).unwrap();
        assert_eq!(pu.cells[0], AtomicMeasure::dirac(vec![1.0, 2.0]));
        assert_eq!(pu.cells[0].atoms()[0].weight, 1.0);

        let nu = YoungMeasure::constant(
            g,
            AtomicMeasure::new(vec![atom(0.4, &[1.0, 0.0]), atom(0.6, &[0.0, -1.0])]).unwrap(),
        );
        let pf: Vec<f64> = (0..g.cells()).map(|i| i as f64 * 0.1).collect();
        let ext = extend_with_pressure(&nu, &pf).unwrap();
        assert_eq!(project_u(&ext).unwrap(), nu);
        let pr = TestFunction::coordinate(3, 2, 10.0);
        let paired = ext.pair_field(&pr).unwrap();
        for (a, b) in paired.iter().zip(&pf) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        let dirac = YoungMeasure::constant(g, AtomicMeasure::dirac(vec![0.5, 0.5]));
        let ext = extend_with_pressure(&dirac, &vec![3.0; g.cells()]).unwrap();
        assert_eq!(ext.cells[1], AtomicMeasure::dirac(vec![0.5, 0.5, 3.0]));
        assert!(extend_with_pressure(&dirac, &[1.0]).is_err());
    }

    #[test]
    fn pressure_examples() {
        let nx = 16;
        // constant field
        let s = MatrixField {
            d: 2,
            nx,
            entries: vec![vec![0.7; nx * nx], vec![0.1; nx * nx], vec![0.1; nx * nx], vec![-0.2; nx * nx]],
        };
        assert!(pressure_from_velocity(&s).unwrap().iter().all(|p| p.abs() < 1e-15));

        // shear u = (sin 2 pi y, 0): div div (u ⊗ u) = d_xx sin^2(2 pi y) = 0
        let u: Vec<Vec<f64>> = (0..nx * nx)
            .map(|p| {
                let y = (p % nx) as f64 / nx as f64;
                vec![(2.0 * PI * y).sin(), 0.0]
            })
            .collect();
        let s = MatrixField::from_velocity(2, nx, &u);
        assert!(pressure_from_velocity(&s).unwrap().iter().all(|p| p.abs() < 1e-14));
    }

    #[test]
    fn pressure_solves_poisson_for_band_limited_data() {
        let nx = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut entries = vec![vec![0.0; nx * nx]; 4];
        let mut coeffs = Vec::new();
        for _ in 0..6 {
            coeffs.push((
                rng.random_range(-5i32..=5),
                rng.random_range(-5i32..=5),
                [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()],
                rng.random::<f64>(),
            ));
        }
        for p in 0..nx * nx {
            let x = (p / nx) as f64 / nx as f64;
            let y = (p % nx) as f64 / nx as f64;
            for (kx, ky, a, ph) in &coeffs {
                let w = (2.0 * PI * (*kx as f64 * x + *ky as f64 * y) + ph).sin();
                entries[0][p] += a[0] * w;
                entries[1][p] += a[1] * w;
                entries[2][p] += a[1] * w;
                entries[3][p] += a[2] * w;
            }
        }
        let s = MatrixField { d: 2, nx, entries };
        let pr = pressure_from_velocity(&s).unwrap();
        let mean: f64 = pr.iter().sum::<f64>() / pr.len() as f64;
        assert!(mean.abs() < 1e-13);
        let lhs = neg_laplacian(&pr, 2, nx);
        let rhs = div_div(&s);
        let num: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num <= 1e-10 * den, "relative mismatch {}", num / den);
    }

    #[test]
    fn distance_examples() {
        let g = grid(4, 4);
        let z = vec![0.7, -0.2, 1.1];
        let a = YoungMeasure::constant(g, AtomicMeasure::dirac(vec![0.0; 3]));
        let b = YoungMeasure::constant(g, AtomicMeasure::dirac(z.clone()));
        let dict = TestDictionary::new(vec![TestFunction::coordinate(3, 0, 10.0)]).unwrap();
        let w = WindowFamily::default();
        assert_eq!(ym_distance(&a, &a, &dict, &w).unwrap(), 0.0);
        // window == 1 gives T |T^2| |z_1|; no other window does better
        let dist = ym_distance(&a, &b, &dict, &w).unwrap();
        assert_relative_eq!(dist, g.t_final * 1.0 * 0.7, max_relative = 1e-12);
        assert_eq!(dist, ym_distance(&b, &a, &dict, &w).unwrap());
        assert!(ym_distance(&a, &b, &TestDictionary { entries: vec![] }, &w).is_err());
    }

    #[test]
    fn default_dictionary_size_and_cutoff() {
        let dict = TestDictionary::default_for(3, 2.0);
        // monomials of degree <= 4 in 3 variables
        assert_eq!(dict.len(), 35);
        for f in &dict.entries {
            assert_eq!(f.eval(&[3.0, 0.0, 0.0]), 0.0);
            let v = f.eval(&[0.5, -0.4, 0.3]);
            assert!(v.abs() <= f.bound);
        }
    }

    #[test]
    fn empirical_examples() {
        let g = SpacetimeGrid {
            d: 2,
            nt: 2,
            nx: 4,
            t_final: 1.0,
        };
        let constant = SampledField {
            grid: g,
            dim: 2,
            data: [0.3, 0.4].repeat(g.cells()),
        };
        let ym = empirical_from_field(&constant, 2, 1).unwrap();
        assert_eq!(ym.grid.nx, 2);
        assert!(ym.cells.iter().all(|c| *c == AtomicMeasure::dirac(vec![0.3, 0.4])));

        let ym1 = empirical_from_field(&constant, 1, 1).unwrap();
        assert_eq!(ym1.cells.len(), g.cells());

        // rows alternate a, b along x: each 2x2 block holds {a, a, b, b}
        let mut data = Vec::new();
        for _t in 0..2 {
            for i in 0..4 {
                for _j in 0..4 {
                    data.push(if i % 2 == 0 { 1.0 } else { -1.0 });
                }
            }
        }
        let f = SampledField { grid: g, dim: 1, data };
        let ym = empirical_from_field(&f, 2, 1).unwrap();
        let expect = AtomicMeasure::new(vec![atom(0.5, &[1.0]), atom(0.5, &[-1.0])]).unwrap();
        assert!(ym.cells.iter().all(|c| *c == expect));
        assert!(matches!(
            empirical_from_field(&f, 3, 1),
            Err(Error::IndivisibleCoarsening { .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let g = grid(2, 2);
        let mu = YoungMeasure::constant(
            g,
            AtomicMeasure::new(vec![atom(0.25, &[1.0, 0.5, 2.0]), atom(0.75, &[0.0, -0.5, 1.0])]).unwrap(),
        );
        let back = YoungMeasure::from_json(&mu.to_json().unwrap()).unwrap();
        assert_eq!(back, mu);
        assert!(YoungMeasure::from_json("{\"schema\":\"other\"}").is_err());
    }

    fn random_measure(rng: &mut ChaCha8Rng, g: SpacetimeGrid) -> YoungMeasure {
        let cells = (0..g.cells())
            .map(|_| {
                let n = rng.random_range(1..4);
                let ws: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
                let total: f64 = ws.iter().sum();
                AtomicMeasure::new(
                    ws.iter()
                        .map(|w| atom(w / total, &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        YoungMeasure::new(g, cells).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pushforward_adjunction(
            pts in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 1..6),
            a in prop::array::uniform4(-2.0f64..2.0),
            c in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let w = 1.0 / pts.len() as f64;
            let nu = AtomicMeasure::new(pts.iter().map(|p| atom(w, p)).collect()).unwrap();
            let g = |z: &[f64]| vec![a[0] * z[0] + a[1] * z[1] + c[0], a[2] * z[0] + a[3] * z[1] + c[1]];
            let f = |z: &[f64]| z[0] * z[0] * z[1] - c[2] * z[1] + 0.5 * z[0];
            let lhs = nu.pushforward(g).unwrap().pair_with(f);
            let rhs = nu.pair_with(|z| f(&g(z)));
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            prop_assert!((nu.pushforward(g).unwrap().total_weight() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn distance_is_a_pseudometric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(2, 4);
            let a = random_measure(&mut rng, g);
            let b = random_measure(&mut rng, g);
            let c = random_measure(&mut rng, g);
            let dict = TestDictionary::default_for(2, 2.0);
            let w = WindowFamily { kmax: 2 };
            let ab = ym_distance(&a, &b, &dict, &w).unwrap();
            let bc = ym_distance(&b, &c, &dict, &w).unwrap();
            let ac = ym_distance(&a, &c, &dict, &w).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ym_distance(&b, &a, &dict, &w).unwrap()).abs() <= 1e-15);
            prop_assert!(ac <= ab + bc + 1e-14);
        }
    }
}
