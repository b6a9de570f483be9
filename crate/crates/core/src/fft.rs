//! Multidimensional FFTs over row-major buffers (thin layer over `rustfft`).

use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place forward (unnormalised) or inverse (normalised by the total size)
/// transform of a row-major array with the given shape.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(data.len(), total, "buffer does not match shape");
    let mut planner = FftPlanner::<f64>::new();
    let mut line = Vec::new();
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        line.resize(len, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for k in 0..len {
                    line[k] = data[base + k * stride];
                }
                fft.process(&mut line);
                for k in 0..len {
                    data[base + k * stride] = line[k];
                }
            }
        }
    }
    if inverse {
        let scale = 1.0 / total as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }
}

/// Forward transform of real data, returning Fourier coefficients normalised
/// as `(1/N) sum f e^{-i k x}`.
pub fn coefficients(real: &[f64], shape: &[usize]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = real.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut buf, shape, false);
    let scale = 1.0 / real.len() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse of [`coefficients`], keeping the real part.
pub fn synthesize(coeffs: &[Complex64], shape: &[usize]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    fft_nd(&mut buf, shape, true);
    let total = coeffs.len() as f64;
    buf.iter().map(|c| c.re * total).collect()
}

/// Signed integer wavenumber of FFT index `i` on an axis of length `n`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Decompose a flat row-major index into a multi-index.
pub fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for axis in (0..shape.len()).rev() {
        out[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_mode_coefficient() {
        let shape = [8, 16];
        let mut f = vec![0.0; 128];
        for i in 0..8 {
            for j in 0..16 {
                let x = i as f64 / 8.0;
                let y = j as f64 / 16.0;
                f[i * 16 + j] = (2.0 * PI * (x + 3.0 * y)).cos();
            }
        }
        let c = coefficients(&f, &shape);
        // cos = (e^{ik.x} + e^{-ik.x})/2
        assert!((c[16 + 3].re - 0.5).abs() < 1e-14);
        assert!((c[7 * 16 + 13].re - 0.5).abs() < 1e-14);
        let back = synthesize(&c, &shape);
        for (a, b) in back.iter().zip(&f) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn wavenumbers() {
        assert_eq!(wavenumber(0, 8), 0);
        assert_eq!(wavenumber(4, 8), 4);
        assert_eq!(wavenumber(5, 8), -3);
        let mut idx = [0; 3];
        unravel(2 * 12 + 1 * 4 + 3, &[5, 3, 4], &mut idx);
        assert_eq!(idx, [2, 1, 3]);
    }
}
