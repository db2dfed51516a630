//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

const MODULE: &str = "linalg";

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn complex_identity(n: usize) -> DMatrix<Complex64> {
    DMatrix::identity(n, n)
}

/// Eigenvalues through a real Schur decomposition. `None` when the QR
/// iteration does not converge within its iteration budget.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    let schur = m.clone().try_schur(1e-14, 10_000)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    let eig = eigenvalues(m).ok_or_else(|| Error::numerical(MODULE, "eigenvalue iteration did not converge"))?;
    Ok(eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Matrix exponential via nalgebra's scaling-and-squaring Padé routine, with
/// an explicit failure instead of non-finite output.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(MODULE, "matrix exponential of a non-finite matrix"));
    }
    let out = m.exp();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(MODULE, "matrix exponential overflows"));
    }
    Ok(out)
}

/// Symmetric positive semi-definite square root `L` with `L Lᵀ = S`. Tiny
/// negative eigenvalues from rounding are clipped to zero.
pub fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        return chol.l();
    }
    let eig = sym.symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Top-right block of `exp([[A, G], [0, B]] t)`, which equals
/// `∫_0^t e^{A(t-w)} G e^{Bw} dw`.
pub fn coupled_integral(a: &DMatrix<f64>, g: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut big = DMatrix::zeros(na + nb, na + nb);
    big.view_mut((0, 0), (na, na)).copy_from(&(a * t));
    big.view_mut((0, na), (na, nb)).copy_from(&(g * t));
    big.view_mut((na, na), (nb, nb)).copy_from(&(b * t));
    let e = expm(&big)?;
    Ok(e.view((0, na), (na, nb)).into_owned())
}

/// Covariance `∫_0^t e^{Au} G Σ Gᵀ e^{Aᵀu} du` by Van Loan's augmented exponential.
pub fn van_loan_covariance(a: &DMatrix<f64>, gsg: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-a * t));
    big.view_mut((0, n), (n, n)).copy_from(&(gsg * t));
    big.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * t));
    let e = expm(&big)?;
    let f22 = e.view((n, n), (n, n)).into_owned();
    let f12 = e.view((0, n), (n, n)).into_owned();
    let cov = f22.transpose() * f12;
    Ok((&cov + cov.transpose()) * 0.5)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_c(m: &DMatrix<Complex64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.norm()))
}

pub fn vec_max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Finite-difference weights for the `order`-th derivative at `x0` using the
/// given stencil nodes (Fornberg's recursion).
pub fn fd_weights(x0: f64, nodes: &[f64], order: usize) -> Vec<f64> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_weights_match_textbook_stencils() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 1);
        assert!((w[0] + 0.5).abs() < 1e-15 && w[1].abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
        let w2 = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert!((w2[0] - 1.0).abs() < 1e-15 && (w2[1] + 2.0).abs() < 1e-15);
        let back = fd_weights(0.0, &[-2.0, -1.0, 0.0], 1);
        assert!((back[0] - 0.5).abs() < 1e-15 && (back[1] + 2.0).abs() < 1e-15 && (back[2] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn van_loan_scalar_ou() {
        // ∫_0^t e^{-2u} · 1 · e^{-2u} du = (1 - e^{-4t}) / 4
        let a = DMatrix::from_element(1, 1, -2.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let c = van_loan_covariance(&a, &q, 0.3).unwrap();
        assert!((c[(0, 0)] - (1.0 - (-1.2f64).exp()) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn coupled_integral_scalar() {
        // ∫_0^t e^{-(t-w)} e^{-2w} dw = e^{-t} - e^{-2t}
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, -2.0);
        let g = DMatrix::from_element(1, 1, 1.0);
        let t = 0.7;
        let v = coupled_integral(&a, &g, &b, t).unwrap()[(0, 0)];
        assert!((v - ((-t).exp() - (-2.0 * t).exp())).abs() < 1e-14);
    }

    #[test]
    fn psd_sqrt_handles_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_sqrt(&s);
        assert!((&l * l.transpose() - s).amax() < 1e-12);
    }
}
