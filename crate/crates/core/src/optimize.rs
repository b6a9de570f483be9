//! Small derivative-free optimisation and hull utilities shared by the wave
//! cone search and the envelope estimators.

/// Nelder–Mead minimisation with a fixed iteration budget.
///
/// Returns the best point and value. `step` sets the initial simplex size.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: f64, iterations: usize) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = f(&x);
        simplex.push((x, v));
    }
    let cmp = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| {
        a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)
    };
    for _ in 0..iterations {
        simplex.sort_by(cmp);
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p.0[k]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, y)| b + 0.5 * (y - b)).collect();
                    let v = f(&x);
                    *p = (x, v);
                }
            }
        }
    }
    simplex.sort_by(cmp);
    simplex.swap_remove(0)
}

/// Value at `x` of the lower convex hull of the points `(t_i, g_i)`
/// (abscissae sorted ascending), together with the two hull vertices that
/// bracket `x` (equal when `x` is itself a vertex).
pub fn lower_hull_at(ts: &[f64], gs: &[f64], x: f64) -> (f64, usize, usize) {
    let hull = lower_hull(ts, gs);
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        if ts[a] <= x && x <= ts[b] {
            if x == ts[a] {
                return (gs[a], a, a);
            }
            if x == ts[b] {
                return (gs[b], b, b);
            }
            let s = (x - ts[a]) / (ts[b] - ts[a]);
            return ((1.0 - s) * gs[a] + s * gs[b], a, b);
        }
    }
    let i = hull[0];
    (gs[i], i, i)
}

/// Indices of the vertices of the lower convex hull (monotone chain).
pub fn lower_hull(ts: &[f64], gs: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..ts.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (ts[b] - ts[a]) * (gs[i] - gs[a]) - (gs[b] - gs[a]) * (ts[i] - ts[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// Unit vector in `R^{k+1}` from `k` hyperspherical angles.
pub fn sphere_point(angles: &[f64]) -> Vec<f64> {
    let k = angles.len();
    let mut out = vec![0.0; k + 1];
    let mut sin_prod = 1.0;
    for i in 0..k {
        out[i] = sin_prod * angles[i].cos();
        sin_prod *= angles[i].sin();
    }
    out[k] = sin_prod;
    out
}

/// Inverse of [`sphere_point`] for a unit (or nonzero) vector.
pub fn sphere_angles(v: &[f64]) -> Vec<f64> {
    let k = v.len() - 1;
    let mut angles = vec![0.0; k];
    for i in 0..k {
        let tail: f64 = v[i + 1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        angles[i] = tail.atan2(v[i]);
    }
    if k > 0 && v[k] < 0.0 {
        angles[k - 1] = -angles[k - 1];
    }
    angles
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_quadratic() {
        let (x, v) = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2),
            &[0.0, 0.0],
            0.5,
            200,
        );
        assert!(v < 1e-10);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn hull_of_double_well() {
        let ts: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let gs: Vec<f64> = ts.iter().map(|s| s * s * (1.0 - s) * (1.0 - s)).collect();
        let (v, a, b) = lower_hull_at(&ts, &gs, 0.5);
        assert_eq!(v, 0.0);
        assert_eq!((a, b), (0, 100));
        let (v, _, _) = lower_hull_at(&ts, &gs, 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hull_of_convex_function_is_itself() {
        let ts: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let gs: Vec<f64> = ts.iter().map(|t| (t - 3.0).powi(2)).collect();
        assert_eq!(lower_hull(&ts, &gs).len(), ts.len());
        let (v, a, b) = lower_hull_at(&ts, &gs, 4.5);
        assert_eq!((a, b), (4, 5));
        assert!((v - 2.5).abs() < 1e-14);
    }

    #[test]
    fn sphere_roundtrip() {
        for v in [
            vec![0.3, -0.4, 0.866],
            vec![-0.1, 0.2, -0.3, 0.9],
            vec![0.0, 0.0, -1.0],
        ] {
            let n: f64 = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            let u: Vec<f64> = v.iter().map(|x| x / n).collect();
            let back = sphere_point(&sphere_angles(&u));
            for (a, b) in back.iter().zip(&u) {
                assert!((a - b).abs() < 1e-12, "{back:?} vs {u:?}");
            }
        }
    }
}
