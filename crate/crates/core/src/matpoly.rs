//! Matrix-coefficient polynomials.
//!
//! A [`MatrixPoly`] stores `n×n` real coefficients in ascending degree order,
//! `P(z) = coeffs[0] + coeffs[1] z + … + coeffs[d] z^d`. The autoregressive
//! polynomial of a CARMA model is usually written in descending form,
//! `I z^p + A_1 z^{p-1} + … + A_p`; [`MatrixPoly::monic`] performs that
//! conversion.
//!
//! Products keep the left factor's coefficients on the left, so
//! `mul(Q, R)` has coefficient `Σ_{i+j=k} Q_i R_j`. Every division below is a
//! left division by a monic divisor, solved by back-substitution from the
//! top degree down; no matrix is ever inverted.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const MODULE: &str = "matpoly";

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPoly {
    n: usize,
    coeffs: Vec<DMatrix<f64>>,
}

impl MatrixPoly {
    /// Builds a polynomial from ascending-degree coefficients.
    pub fn new(n: usize, coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid(MODULE, "dimension must be positive"));
        }
        if coeffs.is_empty() {
            return Err(Error::invalid(MODULE, "at least one coefficient is required"));
        }
        for (k, c) in coeffs.iter().enumerate() {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::dimension(
                    MODULE,
                    format!("coefficient {k} is {}x{}, expected {n}x{n}", c.nrows(), c.ncols()),
                ));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(MODULE, format!("coefficient {k} has non-finite entries")));
            }
        }
        Ok(Self { n, coeffs })
    }

    /// `I z^p + A_1 z^{p-1} + … + A_p` from the descending list `A_1..A_p`.
    pub fn monic(n: usize, descending: &[DMatrix<f64>]) -> Result<Self> {
        let mut coeffs: Vec<DMatrix<f64>> = descending.iter().rev().cloned().collect();
        coeffs.push(DMatrix::identity(n, n));
        Self::new(n, coeffs)
    }

    pub fn scalar(ascending: &[f64]) -> Self {
        let coeffs = if ascending.is_empty() {
            vec![DMatrix::zeros(1, 1)]
        } else {
            ascending.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect()
        };
        Self { n: 1, coeffs }
    }

    pub fn zero(n: usize) -> Self {
        Self { n, coeffs: vec![DMatrix::zeros(n, n)] }
    }

    pub fn identity(n: usize) -> Self {
        Self { n, coeffs: vec![DMatrix::identity(n, n)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Formal degree: the length of the coefficient list minus one. Trailing
    /// zero blocks are kept, see [`MatrixPoly::trimmed`].
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Coefficient of `z^k`, zero beyond the stored degree.
    pub fn coeff(&self, k: usize) -> DMatrix<f64> {
        self.coeffs.get(k).cloned().unwrap_or_else(|| DMatrix::zeros(self.n, self.n))
    }

    pub fn leading(&self) -> &DMatrix<f64> {
        &self.coeffs[self.degree()]
    }

    /// Exact check (tolerance 0) that the leading block is the identity.
    pub fn is_monic(&self) -> bool {
        *self.leading() == DMatrix::identity(self.n, self.n)
    }

    /// Drops exactly-zero leading blocks, keeping at least the constant term.
    pub fn trimmed(&self) -> Self {
        let mut coeffs = self.coeffs.clone();
        while coeffs.len() > 1 && coeffs.last().is_some_and(|c| c.iter().all(|&v| v == 0.0)) {
            coeffs.pop();
        }
        Self { n: self.n, coeffs }
    }

    /// Horner evaluation at a complex point.
    pub fn eval(&self, z: Complex64) -> DMatrix<Complex64> {
        let mut acc = DMatrix::<Complex64>::zeros(self.n, self.n);
        for c in self.coeffs.iter().rev() {
            acc *= z;
            acc += c.map(|v| Complex64::new(v, 0.0));
        }
        acc
    }

    pub fn det_at(&self, z: Complex64) -> Complex64 {
        self.eval(z).determinant()
    }

    pub fn mul(&self, rhs: &MatrixPoly) -> Result<MatrixPoly> {
        self.check_dim(rhs)?;
        let mut out = vec![DMatrix::zeros(self.n, self.n); self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in rhs.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Ok(MatrixPoly { n: self.n, coeffs: out })
    }

    pub fn sub(&self, rhs: &MatrixPoly) -> Result<MatrixPoly> {
        self.check_dim(rhs)?;
        let len = self.coeffs.len().max(rhs.coeffs.len());
        let coeffs = (0..len).map(|k| self.coeff(k) - rhs.coeff(k)).collect();
        Ok(MatrixPoly { n: self.n, coeffs })
    }

    pub fn scale(&self, factor: f64) -> MatrixPoly {
        MatrixPoly { n: self.n, coeffs: self.coeffs.iter().map(|c| c * factor).collect() }
    }

    /// Multiplication by `z^k`.
    pub fn shift(&self, k: usize) -> MatrixPoly {
        let mut coeffs = vec![DMatrix::zeros(self.n, self.n); k];
        coeffs.extend(self.coeffs.iter().cloned());
        MatrixPoly { n: self.n, coeffs }
    }

    /// Largest absolute coefficient entry at degrees `>= from`.
    pub fn max_abs_from(&self, from: usize) -> f64 {
        self.coeffs
            .iter()
            .skip(from)
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_dim(&self, rhs: &MatrixPoly) -> Result<()> {
        if self.n != rhs.n {
            return Err(Error::dimension(MODULE, format!("{} vs {}", self.n, rhs.n)));
        }
        Ok(())
    }
}

/// Left division by a monic divisor: returns `(quotient, remainder)` with
/// `dividend = divisor · quotient + remainder` and `deg remainder < deg divisor`.
pub fn left_divide(divisor: &MatrixPoly, dividend: &MatrixPoly) -> Result<(MatrixPoly, MatrixPoly)> {
    divisor.check_dim(dividend)?;
    if !divisor.is_monic() {
        return Err(Error::precondition(MODULE, "divisor must have identity leading block"));
    }
    let n = divisor.n;
    let d = divisor.degree();
    let top = dividend.degree();
    if top < d {
        let rem = dividend.clone();
        return Ok((MatrixPoly::zero(n), pad_to(rem, d.max(1))));
    }
    let qdeg = top - d;
    let mut quot = vec![DMatrix::<f64>::zeros(n, n); qdeg + 1];
    // Match degrees top..d. Coefficient k of divisor·quot is Σ_i D_i Q_{k-i};
    // the i = d term carries Q_{k-d} with an identity in front.
    for k in (d..=top).rev() {
        let mut c = dividend.coeff(k);
        for i in 0..d {
            let j = k - i;
            if j <= qdeg {
                c -= &divisor.coeffs[i] * &quot[j];
            }
        }
        quot[k - d] = c;
    }
    let quotient = MatrixPoly { n, coeffs: quot };
    let product = divisor.mul(&quotient)?;
    let full = dividend.sub(&product)?;
    let rem_len = d.max(1);
    let remainder = MatrixPoly { n, coeffs: (0..rem_len).map(|k| full.coeff(k)).collect() };
    Ok((quotient, remainder))
}

fn pad_to(p: MatrixPoly, len: usize) -> MatrixPoly {
    let n = p.n;
    let coeffs = (0..len.max(p.coeffs.len())).map(|k| p.coeff(k)).collect();
    MatrixPoly { n, coeffs }
}

/// Checks the MA polynomial convention: coefficient `q` is the identity and
/// every stored coefficient above `q` is zero.
fn check_ma_poly(q_poly: &MatrixPoly, q: usize) -> Result<()> {
    let n = q_poly.n;
    if q_poly.coeff(q) != DMatrix::identity(n, n) {
        return Err(Error::precondition(MODULE, format!("coefficient of z^{q} in Q must be the identity")));
    }
    if q_poly.max_abs_from(q + 1) != 0.0 {
        return Err(Error::precondition(MODULE, format!("coefficients of Q above degree {q} must vanish")));
    }
    Ok(())
}

/// Result of dividing the autoregressive polynomial by the moving-average one.
#[derive(Debug, Clone, PartialEq)]
pub struct Division {
    /// `C_0..C_{p-q-1}`; `R(z) = I z^{p-q} + Σ_j C_j z^j`.
    pub c: Vec<DMatrix<f64>>,
    pub r: MatrixPoly,
    /// Residue `S = Q·R − P`, of degree at most `q − 1` (zero when `q = 0`).
    pub s: MatrixPoly,
}

/// Finds the monic `R` of degree `p − q` with `deg(Q·R − P) ≤ q − 1`.
pub fn long_divide(p_poly: &MatrixPoly, q_poly: &MatrixPoly, q: usize) -> Result<Division> {
    p_poly.check_dim(q_poly)?;
    if !p_poly.is_monic() {
        return Err(Error::precondition(MODULE, "P must be monic"));
    }
    let p = p_poly.degree();
    if q >= p {
        return Err(Error::precondition(MODULE, format!("need q < p, got q={q}, p={p}")));
    }
    check_ma_poly(q_poly, q)?;
    let n = p_poly.n;
    if q == 0 {
        let c = p_poly.coeffs[..p].to_vec();
        return Ok(Division { c, r: p_poly.clone(), s: MatrixPoly::zero(n) });
    }
    let q_monic = MatrixPoly { n, coeffs: q_poly.coeffs[..=q].to_vec() };
    let (r, rem) = left_divide(&q_monic, p_poly)?;
    let s = rem.scale(-1.0);
    let c = r.coeffs[..p - q].to_vec();
    Ok(Division { c, r, s })
}

/// `E_1..E_p` such that `deg(P·E − Q·z^p) ≤ p − 1`, `E(z) = Σ_i E_i z^{p-i}`.
pub fn solve_e(p_poly: &MatrixPoly, q_poly: &MatrixPoly) -> Result<Vec<DMatrix<f64>>> {
    p_poly.check_dim(q_poly)?;
    if !p_poly.is_monic() {
        return Err(Error::precondition(MODULE, "P must be monic"));
    }
    let p = p_poly.degree();
    let q_trim = q_poly.trimmed();
    if q_trim.degree() >= p {
        return Err(Error::precondition(MODULE, "deg Q must be below deg P"));
    }
    let (quot, _) = left_divide(p_poly, &q_trim.shift(p))?;
    Ok((1..=p).map(|i| quot.coeff(p - i)).collect())
}

/// `F_1..F_q` such that `deg(Q·F − S·z^q) ≤ q − 1`, `F(z) = Σ_i F_i z^{q-i}`.
pub fn solve_f(q_poly: &MatrixPoly, s_poly: &MatrixPoly, q: usize) -> Result<Vec<DMatrix<f64>>> {
    q_poly.check_dim(s_poly)?;
    if q == 0 {
        return Err(Error::precondition(MODULE, "no F exists for q = 0; the delay kernel vanishes"));
    }
    check_ma_poly(q_poly, q)?;
    let n = q_poly.n;
    let q_monic = MatrixPoly { n, coeffs: q_poly.coeffs[..=q].to_vec() };
    let (quot, _) = left_divide(&q_monic, &s_poly.shift(q))?;
    Ok((1..=q).map(|i| quot.coeff(q - i)).collect())
}

/// Block companion matrix of `I z^m + A_1 z^{m-1} + … + A_m`: identity blocks on
/// the super-diagonal, last block row `(−A_m, …, −A_1)`.
pub fn companion(descending: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let m = descending.len();
    if m == 0 {
        return Err(Error::invalid(MODULE, "companion of an empty coefficient list"));
    }
    let n = descending[0].nrows();
    if descending.iter().any(|a| a.nrows() != n || a.ncols() != n) {
        return Err(Error::dimension(MODULE, "companion blocks must share one square shape"));
    }
    let mut out = DMatrix::zeros(m * n, m * n);
    for b in 0..m - 1 {
        out.view_mut((b * n, (b + 1) * n), (n, n)).fill_with_identity();
    }
    for (col, a) in descending.iter().rev().enumerate() {
        out.view_mut(((m - 1) * n, col * n), (n, n)).copy_from(&(-a));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn eval_constant_and_roots() {
        let p = MatrixPoly::identity(2);
        assert_eq!(p.eval(Complex64::new(5.0, 0.0)), DMatrix::identity(2, 2).map(|v| Complex64::new(v, 0.0)));
        let cube = MatrixPoly::scalar(&[1.0, 3.0, 3.0, 1.0]);
        assert_eq!(cube.eval(Complex64::new(-1.0, 0.0))[(0, 0)], Complex64::new(0.0, 0.0));
        let lin = MatrixPoly::scalar(&[2.0, 1.0]);
        assert_eq!(lin.eval(Complex64::new(0.0, 1.0))[(0, 0)], Complex64::new(2.0, 1.0));
    }

    #[test]
    fn multiplication_order() {
        let a = MatrixPoly::scalar(&[2.0, 1.0]);
        let b = MatrixPoly::scalar(&[1.0, 1.0, 1.0]);
        assert_eq!(a.mul(&b).unwrap(), MatrixPoly::scalar(&[2.0, 3.0, 3.0, 1.0]));

        let up = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let lo = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let pu = MatrixPoly::new(2, vec![up]).unwrap();
        let pl = MatrixPoly::new(2, vec![lo]).unwrap();
        assert_ne!(pu.mul(&pl).unwrap(), pl.mul(&pu).unwrap());
        let id = MatrixPoly::identity(2);
        assert_eq!(id.mul(&pl).unwrap(), pl);
        assert!(pu.mul(&MatrixPoly::identity(3)).is_err());
    }

    #[test]
    fn long_division_examples() {
        // (z+1)^3 / (z+2)
        let p = MatrixPoly::monic(1, &[s(3.0), s(3.0), s(1.0)]).unwrap();
        let q = MatrixPoly::scalar(&[2.0, 1.0]);
        let d = long_divide(&p, &q, 1).unwrap();
        assert_eq!(d.c, vec![s(1.0), s(1.0)]);
        assert_eq!(d.s.trimmed(), MatrixPoly::scalar(&[1.0]));

        let p2 = MatrixPoly::monic(1, &[s(4.0), s(3.0)]).unwrap();
        let d2 = long_divide(&p2, &q, 1).unwrap();
        assert_eq!(d2.c, vec![s(2.0)]);
        assert_eq!(d2.s.trimmed(), MatrixPoly::scalar(&[1.0]));
    }

    #[test]
    fn q_zero_collapses_to_p() {
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.7]);
        let p = MatrixPoly::monic(2, &[a1.clone(), a2.clone()]).unwrap();
        let d = long_divide(&p, &MatrixPoly::identity(2), 0).unwrap();
        assert_eq!(d.r, p);
        assert_eq!(d.c, vec![a2, a1]);
        assert_eq!(d.s.max_abs_from(0), 0.0);
    }

    #[test]
    fn division_preconditions() {
        let p = MatrixPoly::monic(1, &[s(3.0), s(3.0), s(1.0)]).unwrap();
        let q = MatrixPoly::scalar(&[2.0, 1.0]);
        assert!(long_divide(&p, &q, 3).is_err());
        assert!(long_divide(&MatrixPoly::scalar(&[1.0, 2.0]), &q, 0).is_err());
        assert!(long_divide(&p, &MatrixPoly::scalar(&[2.0, 3.0]), 1).is_err());
        assert!(solve_f(&q, &MatrixPoly::scalar(&[1.0]), 0).is_err());
    }

    #[test]
    fn e_and_f_examples() {
        let p = MatrixPoly::monic(1, &[s(2.0)]).unwrap();
        assert_eq!(solve_e(&p, &MatrixPoly::identity(1)).unwrap(), vec![s(1.0)]);

        let p2 = MatrixPoly::monic(1, &[s(4.0), s(3.0)]).unwrap();
        let q = MatrixPoly::scalar(&[2.0, 1.0]);
        assert_eq!(solve_e(&p2, &q).unwrap(), vec![s(1.0), s(-2.0)]);
        let d = long_divide(&p2, &q, 1).unwrap();
        assert_eq!(solve_f(&q, &d.s, 1).unwrap(), vec![s(1.0)]);
        assert_eq!(solve_f(&q, &MatrixPoly::zero(1), 1).unwrap(), vec![s(0.0)]);

        let p3 = MatrixPoly::monic(1, &[s(3.0), s(3.0), s(1.0)]).unwrap();
        let d3 = long_divide(&p3, &q, 1).unwrap();
        assert_eq!(solve_f(&q, &d3.s, 1).unwrap(), vec![s(1.0)]);
    }

    #[test]
    fn worked_mcarma_e_coefficients() {
        let a1 = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, -0.2, 2.5]);
        let a2 = DMatrix::from_row_slice(2, 2, &[3.0, 0.1, 0.3, 2.0]);
        let a3 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.6]);
        let b0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 1.5]);
        let p = MatrixPoly::monic(2, &[a1.clone(), a2.clone(), a3.clone()]).unwrap();
        let q = MatrixPoly::new(2, vec![b0.clone(), DMatrix::identity(2, 2)]).unwrap();
        let e = solve_e(&p, &q).unwrap();
        assert_eq!(e[0], DMatrix::zeros(2, 2));
        assert_eq!(e[1], DMatrix::identity(2, 2));
        assert!((&e[2] - (&b0 - &a1)).amax() < 1e-14);
        let d = long_divide(&p, &q, 1).unwrap();
        assert!((&d.c[1] - (&a1 - &b0)).amax() < 1e-14);
        assert!((&d.c[0] - (&a2 + &b0 * (&b0 - &a1))).amax() < 1e-14);
        let f = solve_f(&q, &d.s, 1).unwrap();
        let expected = &b0 * (&a2 - &b0 * (&a1 - &b0)) - &a3;
        assert!((&f[0] - expected).amax() < 1e-13);
    }

    #[test]
    fn companion_examples() {
        assert_eq!(companion(&[s(2.0)]).unwrap(), s(-2.0));
        assert_eq!(
            companion(&[s(4.0), s(3.0)]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, -4.0])
        );
        assert!(companion(&[]).is_err());
    }
}
