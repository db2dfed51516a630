//! Linear convolution of real sequences and of matrix-valued sequences.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

/// Below this product of lengths the direct sum is cheaper than three FFTs.
const DIRECT_LIMIT: usize = 1 << 14;

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    if a.len().min(b.len()) <= 32 || a.len() * b.len() <= DIRECT_LIMIT {
        convolve_direct(a, b)
    } else {
        convolve_fft(a, b)
    }
}

pub fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

pub fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let len = a.len() + b.len() - 1;
    let size = len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(size, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(size, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..len].iter().map(|z| z.re * scale).collect()
}

/// `out_k = Σ_l a_l · b_{k-l}` for sequences of matrices, keeping the left
/// factor on the left. Shapes: `a_l` is `r×s`, `b_l` is `s×c`.
pub fn convolve_matrices(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (r, s, c) = (a[0].nrows(), a[0].ncols(), b[0].ncols());
    let len = a.len() + b.len() - 1;
    let mut out = vec![DMatrix::zeros(r, c); len];
    for i in 0..r {
        for k in 0..s {
            let sa: Vec<f64> = a.iter().map(|m| m[(i, k)]).collect();
            if sa.iter().all(|v| *v == 0.0) {
                continue;
            }
            for j in 0..c {
                let sb: Vec<f64> = b.iter().map(|m| m[(k, j)]).collect();
                if sb.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for (t, v) in convolve(&sa, &sb).into_iter().enumerate() {
                    out[t][(i, j)] += v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_matches_direct() {
        let a: Vec<f64> = (0..300).map(|k| (k as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..200).map(|k| (-(k as f64) * 0.05).exp()).collect();
        let d = convolve_direct(&a, &b);
        let f = convolve_fft(&a, &b);
        assert_eq!(d.len(), f.len());
        for (x, y) in d.iter().zip(&f) {
            assert!((x - y).abs() < 1e-11);
        }
    }

    #[test]
    fn matrix_convolution_keeps_order() {
        let a = vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])];
        let b = vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])];
        let ab = convolve_matrices(&a, &b);
        let ba = convolve_matrices(&b, &a);
        assert_eq!(ab[0], &a[0] * &b[0]);
        assert_ne!(ab[0], ba[0]);
    }
}
