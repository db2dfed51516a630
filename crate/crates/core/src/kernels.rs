//! Closed-form CARMA kernels through matrix exponentials.
//!
//! For `P(D)X = Q(D)DZ` with `P(z) = I z^p + A_1 z^{p-1} + … + A_p` and
//! `Q(z) = B_0 + … + B_{q-1} z^{q-1} + I z^q`, the moving-average kernel is
//! `g̃(t) = e₁ᵀ e^{At} E` and the delay kernel of the equivalent delay equation
//! of order `m = p − q` is `f(t) = e₁ᵀ e^{Bt} F`.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matpoly::{self, MatrixPoly};
use crate::msdde::{DelayMeasure, Density, HigherOrderSdde, SampledKernel};
use crate::stability::{self, HalfPlaneReport};

const MODULE: &str = "kernels";

/// Step of the grid on which truncation horizons are located.
pub const HORIZON_GRID: f64 = 1.0 / 256.0;

/// Matrix exponential (scaling and squaring with a Padé core).
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dimension(MODULE, "matrix exponential of a non-square matrix"));
    }
    linalg::expm(m)
}

#[derive(Debug, Clone)]
pub struct CarmaModel {
    n: usize,
    p: usize,
    q: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    p_poly: MatrixPoly,
    q_poly: MatrixPoly,
    c: Vec<DMatrix<f64>>,
    r_poly: MatrixPoly,
    s_poly: MatrixPoly,
    e: Vec<DMatrix<f64>>,
    f: Vec<DMatrix<f64>>,
    acomp: DMatrix<f64>,
    bcomp: Option<DMatrix<f64>>,
    e_stack: DMatrix<f64>,
    f_stack: Option<DMatrix<f64>>,
    p_report: HalfPlaneReport,
    q_report: Option<HalfPlaneReport>,
    epsilon: f64,
    cg: f64,
}

impl CarmaModel {
    /// `a = [A_1, …, A_p]`, `b = [B_0, …, B_{q-1}]`; `q` is `b.len()`.
    pub fn new(n: usize, a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let (p, q) = (a.len(), b.len());
        if n == 0 || p == 0 {
            return Err(Error::invalid(MODULE, "need n ≥ 1 and p ≥ 1"));
        }
        if q >= p {
            return Err(Error::invalid(MODULE, format!("need q < p, got p={p}, q={q}")));
        }
        for (name, list) in [("A", &a), ("B", &b)] {
            if list.iter().any(|m| m.nrows() != n || m.ncols() != n) {
                return Err(Error::dimension(MODULE, format!("{name} coefficients must be {n}x{n}")));
            }
        }
        let p_poly = MatrixPoly::monic(n, &a)?;
        let mut qc = b.clone();
        qc.push(DMatrix::identity(n, n));
        let q_poly = MatrixPoly::new(n, qc)?;

        let p_report = stability::halfplane_check(&p_poly)?;
        if !p_report.pass {
            return Err(Error::hypothesis(
                MODULE,
                format!("causality: det P(z) has a root with Re z = {:.3e} ≥ 0", p_report.max_real_part),
            ));
        }
        let q_report = if q >= 1 {
            let r = stability::halfplane_check(&q_poly)?;
            if !r.pass {
                return Err(Error::hypothesis(
                    MODULE,
                    format!("invertibility: det Q(z) has a root with Re z = {:.3e} ≥ 0", r.max_real_part),
                ));
            }
            Some(r)
        } else {
            None
        };

        let div = matpoly::long_divide(&p_poly, &q_poly, q)?;
        let e = matpoly::solve_e(&p_poly, &q_poly)?;
        let f = if q >= 1 { matpoly::solve_f(&q_poly, &div.s, q)? } else { Vec::new() };
        let acomp = matpoly::companion(&a)?;
        let bcomp = if q >= 1 {
            let desc: Vec<DMatrix<f64>> = b.iter().rev().cloned().collect();
            Some(matpoly::companion(&desc)?)
        } else {
            None
        };
        let e_stack = stack(&e, n);
        let f_stack = if q >= 1 { Some(stack(&f, n)) } else { None };

        let mut abscissa = p_report.max_real_part;
        if let Some(r) = &q_report {
            abscissa = abscissa.max(r.max_real_part);
        }
        let epsilon = -0.9 * abscissa;

        let mut model = Self {
            n,
            p,
            q,
            a,
            b,
            p_poly,
            q_poly,
            c: div.c,
            r_poly: div.r,
            s_poly: div.s,
            e,
            f,
            acomp,
            bcomp,
            e_stack,
            f_stack,
            p_report,
            q_report,
            epsilon,
            cg: 0.0,
        };
        model.cg = model.decay_constant()?;
        Ok(model)
    }

    /// Scalar model from `P(z) = z^p + a_1 z^{p-1} + … + a_p` and
    /// `Q(z) = b_0 + … + b_{q-1} z^{q-1} + z^q`.
    pub fn scalar(a: &[f64], b: &[f64]) -> Result<Self> {
        let one = |v: &f64| DMatrix::from_element(1, 1, *v);
        Self::new(1, a.iter().map(one).collect(), b.iter().map(one).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Order `p − q` of the equivalent delay equation.
    pub fn order(&self) -> usize {
        self.p - self.q
    }

    pub fn a_coeffs(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b_coeffs(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn p_poly(&self) -> &MatrixPoly {
        &self.p_poly
    }

    pub fn q_poly(&self) -> &MatrixPoly {
        &self.q_poly
    }

    pub fn r_poly(&self) -> &MatrixPoly {
        &self.r_poly
    }

    pub fn s_poly(&self) -> &MatrixPoly {
        &self.s_poly
    }

    /// `C_0..C_{p-q-1}`.
    pub fn c_coeffs(&self) -> &[DMatrix<f64>] {
        &self.c
    }

    /// `C_k` with the convention `C_{p-q} = I`.
    pub fn c_ext(&self, k: usize) -> DMatrix<f64> {
        if k == self.order() {
            DMatrix::identity(self.n, self.n)
        } else {
            self.c[k].clone()
        }
    }

    /// `E_1..E_p`.
    pub fn e_coeffs(&self) -> &[DMatrix<f64>] {
        &self.e
    }

    /// `F_1..F_q`; empty when `q = 0`.
    pub fn f_coeffs(&self) -> &[DMatrix<f64>] {
        &self.f
    }

    pub fn a_companion(&self) -> &DMatrix<f64> {
        &self.acomp
    }

    pub fn b_companion(&self) -> Option<&DMatrix<f64>> {
        self.bcomp.as_ref()
    }

    /// `E_1..E_p` stacked into an `np×n` matrix.
    pub fn e_stack(&self) -> &DMatrix<f64> {
        &self.e_stack
    }

    pub fn f_stack(&self) -> Option<&DMatrix<f64>> {
        self.f_stack.as_ref()
    }

    pub fn p_report(&self) -> &HalfPlaneReport {
        &self.p_report
    }

    pub fn q_report(&self) -> Option<&HalfPlaneReport> {
        self.q_report.as_ref()
    }

    /// Certified decay rate `ε`: `|g̃(t)|, |f(t)| ≤ C e^{-εt}`.
    pub fn decay_rate(&self) -> f64 {
        self.epsilon
    }

    /// Constant `C` of the decay certificate.
    pub fn decay_constant_estimate(&self) -> f64 {
        self.cg
    }

    /// `e₁ᵀ` selecting the first block of a stacked state.
    pub fn first_block(&self, blocks: usize) -> DMatrix<f64> {
        let mut e1 = DMatrix::zeros(self.n, self.n * blocks);
        e1.view_mut((0, 0), (self.n, self.n)).fill_with_identity();
        e1
    }

    pub fn gtilde(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 {
            return Ok(DMatrix::zeros(self.n, self.n));
        }
        let phi = matrix_exp(&(&self.acomp * t))?;
        Ok(phi.rows(0, self.n) * &self.e_stack)
    }

    pub fn f_kernel(&self, t: f64) -> Result<DMatrix<f64>> {
        match (&self.bcomp, &self.f_stack) {
            (Some(bc), Some(fs)) if t >= 0.0 => {
                let phi = matrix_exp(&(bc * t))?;
                Ok(phi.rows(0, self.n) * fs)
            }
            _ => Ok(DMatrix::zeros(self.n, self.n)),
        }
    }

    /// `Σ_{k=j}^{p-q} A^{k-j} E C_k`, the `np×n` weight of `g̃_j`.
    pub fn gtilde_j_weight(&self, j: usize) -> Result<DMatrix<f64>> {
        let m = self.order();
        if j == 0 || j > m {
            return Err(Error::invalid(MODULE, format!("index j = {j} outside 1..={m}")));
        }
        let mut acc = DMatrix::zeros(self.n * self.p, self.n);
        let mut apow_e = self.e_stack.clone();
        for k in j..=m {
            acc += &apow_e * self.c_ext(k);
            apow_e = &self.acomp * apow_e;
        }
        Ok(acc)
    }

    /// Prediction weight `g̃_j(t) = e₁ᵀ e^{At} Σ_{k=j}^{p-q} A^{k-j} E C_k`.
    pub fn gtilde_j(&self, j: usize, t: f64) -> Result<DMatrix<f64>> {
        let w = self.gtilde_j_weight(j)?;
        if t < 0.0 {
            return Err(Error::invalid(MODULE, "g̃_j is only used at t ≥ 0"));
        }
        let phi = matrix_exp(&(&self.acomp * t))?;
        Ok(phi.rows(0, self.n) * w)
    }

    /// `e₁ᵀ e^{A·kΔ} W` for `k = 0..len`, by repeated multiplication.
    fn sample_flow(gen: &DMatrix<f64>, n: usize, weight: &DMatrix<f64>, dt: f64, len: usize) -> Result<Vec<DMatrix<f64>>> {
        let step = matrix_exp(&(gen * dt))?;
        let mut state = weight.clone();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(state.rows(0, n).into_owned());
            state = &step * state;
        }
        Ok(out)
    }

    /// Samples of `g̃` at `kΔ`, with the jump at 0 recorded as the atom.
    pub fn sample_gtilde(&self, dt: f64, len: usize) -> Result<SampledKernel> {
        let values = Self::sample_flow(&self.acomp, self.n, &self.e_stack, dt, len)?;
        SampledKernel::new(dt, values, self.e[0].clone())
    }

    pub fn sample_gtilde_j(&self, j: usize, dt: f64, len: usize) -> Result<SampledKernel> {
        let w = self.gtilde_j_weight(j)?;
        let values = Self::sample_flow(&self.acomp, self.n, &w, dt, len)?;
        let atom = values[0].clone();
        SampledKernel::new(dt, values, atom)
    }

    /// Samples of `f`; `None` when `q = 0`.
    pub fn sample_f(&self, dt: f64, len: usize) -> Result<Option<SampledKernel>> {
        match (&self.bcomp, &self.f_stack) {
            (Some(bc), Some(fs)) => {
                let values = Self::sample_flow(bc, self.n, fs, dt, len)?;
                let atom = values[0].clone();
                Ok(Some(SampledKernel::new(dt, values, atom)?))
            }
            _ => Ok(None),
        }
    }

    fn kernel_envelope(&self, dt: f64, len: usize) -> Result<Vec<f64>> {
        let g = Self::sample_flow(&self.acomp, self.n, &self.e_stack, dt, len)?;
        let mut env: Vec<f64> = g.iter().map(linalg::max_abs).collect();
        if let Some(fk) = self.sample_f(dt, len)? {
            for (e, v) in env.iter_mut().zip(fk.values()) {
                *e = e.max(linalg::max_abs(v));
            }
        }
        Ok(env)
    }

    fn decay_constant(&self) -> Result<f64> {
        let span = 4.0 / self.epsilon;
        let len = ((span / HORIZON_GRID).ceil() as usize + 1).clamp(401, 1 << 16);
        let dt = span / (len - 1) as f64;
        let env = self.kernel_envelope(dt, len)?;
        Ok(env.iter().enumerate().map(|(k, v)| v * (self.epsilon * k as f64 * dt).exp()).fold(0.0, f64::max))
    }

    /// Smallest `T` on the `2^-8` grid past which `|g̃|` and `|f|` stay below
    /// `tol`, starting from `log(C/tol)/ε` and expanding until the tail over
    /// a further `4/ε` is clean.
    pub fn truncation_horizon(&self, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(Error::invalid(MODULE, "tolerance must be positive"));
        }
        let guard = 4.0 / self.epsilon;
        let mut t_hi = ((self.cg / tol).ln() / self.epsilon).max(HORIZON_GRID);
        loop {
            let len = ((t_hi + guard) / HORIZON_GRID).ceil() as usize + 1;
            let env = self.kernel_envelope(HORIZON_GRID, len)?;
            let start = (t_hi / HORIZON_GRID).floor() as usize;
            if env[start..].iter().all(|v| *v < tol) {
                let last = env.iter().rposition(|v| *v >= tol);
                return Ok(match last {
                    Some(k) => (k + 1) as f64 * HORIZON_GRID,
                    None => 0.0,
                });
            }
            if t_hi > 1e6 {
                return Err(Error::numerical(MODULE, "kernel does not decay below the tolerance"));
            }
            t_hi *= 1.5;
        }
    }

    /// Equivalent delay equation of order `p − q`:
    /// `ϖ_0 = −C_0 δ_0 + f(u) du`, `ϖ_j = −C_j δ_0`.
    pub fn to_higher_order(&self) -> Result<HigherOrderSdde> {
        let mut varpi = Vec::with_capacity(self.order());
        for (j, cj) in self.c.iter().enumerate() {
            let mut w = DelayMeasure::atom_only(self.n, 0.0, -cj)?;
            if j == 0 {
                if let (Some(bc), Some(fs)) = (&self.bcomp, &self.f_stack) {
                    w = w.with_density(Density::MatrixExp {
                        left: self.first_block(self.q),
                        generator: bc.clone(),
                        right: fs.clone(),
                    })?;
                }
            }
            varpi.push(w);
        }
        HigherOrderSdde::new(varpi)
    }

    /// Human-readable description of the model and its derived objects.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}, p = {}, q = {}, order p-q = {}", self.n, self.p, self.q, self.order());
        let mat = |m: &DMatrix<f64>| {
            if m.len() == 1 {
                return format!("{}", m[0]);
            }
            let rows: Vec<String> = m
                .row_iter()
                .map(|r| format!("[{}]", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")))
                .collect();
            format!("[{}]", rows.join(", "))
        };
        for (i, a) in self.a.iter().enumerate() {
            let _ = writeln!(out, "A_{} = {}", i + 1, mat(a));
        }
        for (i, b) in self.b.iter().enumerate() {
            let _ = writeln!(out, "B_{} = {}", i, mat(b));
        }
        for (j, c) in self.c.iter().enumerate() {
            let _ = writeln!(out, "C_{} = {}", j, mat(c));
        }
        for (i, e) in self.e.iter().enumerate() {
            let _ = writeln!(out, "E_{} = {}", i + 1, mat(e));
        }
        for (i, f) in self.f.iter().enumerate() {
            let _ = writeln!(out, "F_{} = {}", i + 1, mat(f));
        }
        let eig = |r: &HalfPlaneReport| {
            r.eigenvalues.iter().map(|z| format!("{:.6}{:+.6}i", z.re, z.im)).collect::<Vec<_>>().join(", ")
        };
        let _ = writeln!(out, "eig(A) = {{{}}}", eig(&self.p_report));
        if let Some(r) = &self.q_report {
            let _ = writeln!(out, "eig(B) = {{{}}}", eig(r));
        }
        let _ = writeln!(out, "decay rate epsilon = {}", self.epsilon);
        let _ = writeln!(out, "decay constant C = {}", self.cg);
        out
    }
}

fn stack(blocks: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n * blocks.len(), n);
    for (i, b) in blocks.iter().enumerate() {
        out.view_mut((i * n, 0), (n, n)).copy_from(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn carma21() -> CarmaModel {
        CarmaModel::scalar(&[4.0, 3.0], &[2.0]).unwrap()
    }

    #[test]
    fn matrix_exp_examples() {
        assert_eq!(matrix_exp(&DMatrix::zeros(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let d = matrix_exp(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.0]))).unwrap();
        assert!((d[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15 && (d[(1, 1)] - (-2.0f64).exp()).abs() < 1e-15);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(matrix_exp(&nil).unwrap(), DMatrix::identity(2, 2) + nil);
        assert!(matrix_exp(&DMatrix::from_element(1, 1, 1e6)).is_err());
    }

    #[test]
    fn ou_kernels() {
        let ou = CarmaModel::scalar(&[2.0], &[]).unwrap();
        for t in [0.0, 0.3, 2.0] {
            assert!((ou.gtilde(t).unwrap()[(0, 0)] - (-2.0 * t).exp()).abs() < 1e-14);
            assert!((ou.gtilde_j(1, t).unwrap()[(0, 0)] - (-2.0 * t).exp()).abs() < 1e-14);
            assert_eq!(ou.f_kernel(t).unwrap()[(0, 0)], 0.0);
        }
        assert_eq!(ou.gtilde(-1.0).unwrap()[(0, 0)], 0.0);
        assert!(ou.sample_f(0.1, 10).unwrap().is_none());
        let t = ou.truncation_horizon(1e-8).unwrap();
        assert!((t - 1e8f64.ln() / 2.0).abs() <= HORIZON_GRID, "{t}");
        assert!(ou.truncation_horizon(1.0).unwrap() <= HORIZON_GRID);
    }

    #[test]
    fn carma21_closed_forms() {
        let m = carma21();
        for t in [0.0f64, 0.5, 1.7] {
            let g = 0.5 * (-t).exp() + 0.5 * (-3.0 * t).exp();
            assert!((m.gtilde(t).unwrap()[(0, 0)] - g).abs() < 1e-14);
            assert!((m.f_kernel(t).unwrap()[(0, 0)] - (-2.0 * t).exp()).abs() < 1e-14);
        }
        assert_eq!(m.gtilde(0.0).unwrap()[(0, 0)], 1.0);
        let t = m.truncation_horizon(1e-8).unwrap();
        // slowest mode ½e^{-t} gives log(5e7) ≈ 17.73
        assert!((17.0..21.0).contains(&t), "{t}");
    }

    #[test]
    fn carma31_worked_example() {
        let m = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap();
        assert_eq!(m.order(), 2);
        assert!((m.c_coeffs()[1][(0, 0)] - 1.0).abs() < 1e-12);
        assert!((m.c_coeffs()[0][(0, 0)] - 1.0).abs() < 1e-12);
        assert!((m.f_coeffs()[0][(0, 0)] - 1.0).abs() < 1e-12);
        for t in [0.0, 0.4, 3.0] {
            assert!((m.f_kernel(t).unwrap()[(0, 0)] - (-2.0 * t).exp()).abs() < 1e-12);
        }
        // E = (0, 1, B0 − A1); g̃_1 uses EC_1 + AE
        let e = m.e_stack();
        assert_eq!(e[(0, 0)], 0.0);
        let w1 = m.gtilde_j_weight(1).unwrap();
        let expect = e * m.c_coeffs()[1].clone() + m.a_companion() * e;
        assert!((w1 - expect).amax() < 1e-14);
        assert_eq!(m.gtilde(0.0).unwrap()[(0, 0)], 0.0);
        assert!((m.gtilde_j(2, 0.0).unwrap() - &m.e_coeffs()[0]).amax() < 1e-15);
    }

    #[test]
    fn hypotheses_are_enforced() {
        assert!(matches!(CarmaModel::scalar(&[-1.0], &[]), Err(Error::Hypothesis { .. })));
        // Q(z) = z − 1 is not invertible
        assert!(matches!(CarmaModel::scalar(&[4.0, 3.0], &[-1.0]), Err(Error::Hypothesis { .. })));
        assert!(CarmaModel::scalar(&[4.0, 3.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn gtilde_j_range() {
        let m = carma21();
        assert!(m.gtilde_j(0, 1.0).is_err());
        assert!(m.gtilde_j(2, 1.0).is_err());
    }

    #[test]
    fn semigroup_consistency() {
        let m = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap();
        let (s, t) = (0.7, 1.9);
        let direct = m.gtilde(s + t).unwrap();
        let split = (matrix_exp(&(m.a_companion() * s)).unwrap() * matrix_exp(&(m.a_companion() * t)).unwrap()).rows(0, 1)
            * m.e_stack();
        assert!((direct - split).amax() <= 1e-10 * m.gtilde(s + t).unwrap().amax());
    }

    #[test]
    fn nested_measure_determinant_matches_polynomials() {
        let m = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap();
        let sys = m.to_higher_order().unwrap();
        let eta = sys.nest();
        for y in [-3.0, 0.0, 2.0, 11.0] {
            let z = Complex64::new(0.0, -y);
            let expect = m.p_poly().det_at(z) / m.q_poly().det_at(z);
            let got = eta.eval_h(Complex64::new(0.0, y)).unwrap().determinant();
            assert!((got - expect).norm() <= 1e-8 * expect.norm(), "y={y}");
        }
        let c21 = carma21().to_higher_order().unwrap().nest();
        assert!((c21.eval_h(Complex64::new(0.0, 0.0)).unwrap()[(0, 0)] - 1.5).norm() < 1e-14);
    }

    #[test]
    fn smoothness_at_origin() {
        // p − q = 3: g̃(0) = g̃′(0) = 0
        let m = CarmaModel::scalar(&[6.0, 11.0, 6.0, 1.0], &[3.0]).unwrap();
        let h = 1e-4;
        let g: Vec<f64> = (0..3).map(|k| m.gtilde(k as f64 * h).unwrap()[(0, 0)]).collect();
        assert_eq!(g[0], 0.0);
        let d1 = (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h);
        assert!(d1.abs() < 1e-6, "{d1}");
    }

    #[test]
    fn summary_lists_coefficients() {
        let s = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap().summary();
        assert!(s.contains("C_0 = 1\n") && s.contains("C_1 = 1\n") && s.contains("F_1 = 1\n"), "{s}");
    }
}
