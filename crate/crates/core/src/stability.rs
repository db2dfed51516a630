//! Root-location checks: causality and invertibility of matrix polynomials,
//! and a frequency scan of `det h(iy)` for general delay equations.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matpoly::{companion, MatrixPoly};
use crate::msdde::DelayMeasure;

const MODULE: &str = "stability";

/// Default margin for the strict left-half-plane test.
pub const DEFAULT_MARGIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct HalfPlaneReport {
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part: f64,
    /// Distance of the spectrum to the imaginary axis.
    pub margin: f64,
    pub pass: bool,
}

/// Decides whether `det P(z) ≠ 0` on the closed right half-plane by locating
/// the eigenvalues of the block companion matrix of the monic `P`.
pub fn halfplane_check(p: &MatrixPoly) -> Result<HalfPlaneReport> {
    halfplane_check_tol(p, DEFAULT_MARGIN_TOL)
}

pub fn halfplane_check_tol(p: &MatrixPoly, tol: f64) -> Result<HalfPlaneReport> {
    if !p.is_monic() {
        return Err(Error::precondition(MODULE, "polynomial must be monic"));
    }
    let deg = p.degree();
    if deg == 0 {
        // det I never vanishes.
        return Ok(HalfPlaneReport { eigenvalues: Vec::new(), max_real_part: f64::NEG_INFINITY, margin: f64::INFINITY, pass: true });
    }
    let descending: Vec<DMatrix<f64>> = (0..deg).rev().map(|k| p.coeff(k)).collect();
    let comp = companion(&descending)?;
    let eigenvalues = linalg::eigenvalues(&comp)
        .ok_or_else(|| Error::numerical(MODULE, "companion eigenvalue iteration did not converge"))?;
    let max_real_part = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let margin = eigenvalues.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    Ok(HalfPlaneReport { pass: max_real_part < -tol, eigenvalues, max_real_part, margin })
}

/// Minimum of `|det h(iy)|` over a frequency grid together with the minimizer.
/// A positive minimum is evidence, not proof, that `det h(iy)` never vanishes.
pub fn msdde_char_scan(eta: &DelayMeasure, y_grid: &[f64]) -> Result<(f64, f64)> {
    if y_grid.is_empty() {
        return Err(Error::invalid(MODULE, "empty frequency grid"));
    }
    let mut best = (f64::INFINITY, y_grid[0]);
    for &y in y_grid {
        let d = eta.eval_h(Complex64::new(0.0, y))?.determinant().norm();
        if d < best.0 {
            best = (d, y);
        }
    }
    Ok(best)
}

/// Symmetric scan grid on `[-Y, Y]`, `Y = 50 · scale`, with `points` intervals
/// so that `y = 0` is always a node.
pub fn default_scan_grid(scale: f64, points: usize) -> Vec<f64> {
    let y_max = 50.0 * scale.max(1e-12);
    let intervals = points.max(2) & !1;
    (0..=intervals).map(|k| -y_max + 2.0 * y_max * k as f64 / intervals as f64).collect()
}

pub const DEFAULT_SCAN_POINTS: usize = 4096;

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_examples() {
        let r = halfplane_check(&MatrixPoly::scalar(&[2.0, 1.0])).unwrap();
        assert!(r.pass);
        assert!((r.eigenvalues[0] - Complex64::new(-2.0, 0.0)).norm() < 1e-12);

        let cube = MatrixPoly::monic(1, &[s(3.0), s(3.0), s(1.0)]).unwrap();
        let r = halfplane_check(&cube).unwrap();
        assert!(r.pass);
        assert_eq!(r.eigenvalues.len(), 3);
        // a triple root is ill-conditioned: eigenvalues land within ~eps^(1/3)
        for z in &r.eigenvalues {
            assert!((z - Complex64::new(-1.0, 0.0)).norm() < 1e-4);
        }

        let unstable = halfplane_check(&MatrixPoly::scalar(&[-1.0, 1.0])).unwrap();
        assert!(!unstable.pass);
        assert!((unstable.max_real_part - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_root_fails() {
        // z^2 + 1 has roots on the imaginary axis
        let r = halfplane_check(&MatrixPoly::scalar(&[1.0, 0.0, 1.0])).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn rejects_non_monic() {
        assert!(halfplane_check(&MatrixPoly::scalar(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn ou_scan_minimum_at_zero() {
        let eta = DelayMeasure::atom_only(1, 0.0, s(-2.0)).unwrap();
        let grid = default_scan_grid(1.0, DEFAULT_SCAN_POINTS);
        let (min, arg) = msdde_char_scan(&eta, &grid).unwrap();
        assert!((min - 2.0).abs() < 1e-12);
        assert_eq!(arg, 0.0);
    }

    #[test]
    fn degenerate_measure_scans_to_zero() {
        let eta = DelayMeasure::atom_only(1, 0.0, s(0.0)).unwrap();
        let (min, arg) = msdde_char_scan(&eta, &default_scan_grid(1.0, 64)).unwrap();
        assert_eq!(min, 0.0);
        assert_eq!(arg, 0.0);
    }
}
