use carma_sdde::drivers::frac_integrate;
use carma_sdde::linalg::to_complex;
use carma_sdde::matpoly::{companion, long_divide};
use carma_sdde::msdde::det_reduction_check;
use carma_sdde::{CarmaModel, DelayMeasure, Density, HigherOrderSdde, MatrixPoly};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

/// `zI + D` with every eigenvalue of `D` having real part at least `margin`.
fn shifted_factor(n: usize, entries: &[f64], margin: f64) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    let shift = m.norm() + margin;
    m + DMatrix::identity(n, n) * shift
}

/// Monic product `∏ (zI + D_k)`, roots in the open left half-plane.
fn stable_poly(n: usize, raw: &[Vec<f64>], margins: &[f64]) -> MatrixPoly {
    let mut out = MatrixPoly::identity(n);
    for (entries, margin) in raw.iter().zip(margins) {
        let d = shifted_factor(n, entries, *margin);
        let factor = MatrixPoly::new(n, vec![d, DMatrix::identity(n, n)]).unwrap();
        out = out.mul(&factor).unwrap();
    }
    out
}

fn descending(p: &MatrixPoly) -> Vec<DMatrix<f64>> {
    let deg = p.degree();
    (1..=deg).map(|k| p.coeff(deg - k)).collect()
}

fn model_strategy() -> impl Strategy<Value = (usize, MatrixPoly, MatrixPoly)> {
    (1usize..=2, 1usize..=5).prop_flat_map(|(n, p)| {
        (0..p).prop_flat_map(move |q| {
            let factors = |k: usize| {
                (
                    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), k),
                    prop::collection::vec(0.2f64..1.5, k),
                )
            };
            (factors(p), factors(q)).prop_map(move |((pa, pm), (qa, qm))| {
                (q, stable_poly(n, &pa, &pm), stable_poly(n, &qa, &qm))
            })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residue_degree_is_below_q((q, pp, qp) in model_strategy()) {
        let div = long_divide(&pp, &qp, q).unwrap();
        let qr = qp.mul(&div.r).unwrap();
        let residue = qr.sub(&pp).unwrap();
        let scale = pp.coeffs().iter().map(|c| c.amax()).fold(1.0, f64::max);
        prop_assert!(residue.max_abs_from(q) < 1e-10 * scale, "{}", residue.max_abs_from(q));
        prop_assert!((div.s.sub(&residue).unwrap()).max_abs_from(0) < 1e-10 * scale);
    }

    #[test]
    fn companion_has_the_polynomial_spectrum(
        (_q, pp, _qp) in model_strategy(),
        re in -2.0f64..2.0,
        im in -2.0f64..2.0,
    ) {
        let n = pp.dim();
        let a = companion(&descending(&pp)).unwrap();
        let z = Complex64::new(re, im);
        let lhs = (to_complex(&DMatrix::identity(a.nrows(), a.nrows())) * z - to_complex(&a)).determinant();
        let rhs = pp.det_at(z);
        prop_assert!((lhs - rhs).norm() <= 1e-9 * rhs.norm().max(1.0), "n={n} {lhs} vs {rhs}");
    }

    #[test]
    fn carma_models_from_stable_factors_pass_both_checks((q, pp, qp) in model_strategy()) {
        let n = pp.dim();
        let a = descending(&pp);
        let b: Vec<DMatrix<f64>> = (0..q).map(|k| qp.coeff(k)).collect();
        let model = CarmaModel::new(n, a, b).unwrap();
        prop_assert!(model.p_report().pass);
        prop_assert!(model.q_report().map(|r| r.pass).unwrap_or(true));
        prop_assert!(model.s_poly().max_abs_from(q.max(1)) < 1e-8);
    }

    #[test]
    fn nested_determinant_reduces(
        n in 1usize..=2,
        m in 1usize..=3,
        atoms in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3),
        delays in prop::collection::vec(0.0f64..1.0, 3),
        gens in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 4), 3),
        re in 0.0f64..1.0,
        im in -5.0f64..5.0,
    ) {
        let varpi: Vec<DelayMeasure> = (0..m)
            .map(|j| {
                let w = DMatrix::from_row_slice(n, n, &atoms[j][..n * n]);
                let g = DMatrix::from_row_slice(n, n, &gens[j][..n * n]) - DMatrix::identity(n, n) * 2.0;
                DelayMeasure::atom_only(n, delays[j], w)
                    .unwrap()
                    .with_density(Density::MatrixExp {
                        left: DMatrix::identity(n, n) * 0.5,
                        generator: g,
                        right: DMatrix::identity(n, n),
                    })
                    .unwrap()
            })
            .collect();
        let sys = HigherOrderSdde::new(varpi).unwrap();
        let z = Complex64::new(re, im);
        let (lhs, rhs) = det_reduction_check(&sys, z).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-8 * rhs.norm().max(lhs.norm()).max(1e-300), "{lhs} vs {rhs}");
    }

    #[test]
    fn frac_integrate_is_linear(
        f in prop::collection::vec(-1.0f64..1.0, 1..300),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        beta in 0.01f64..0.49,
    ) {
        let g: Vec<f64> = f.iter().enumerate().map(|(k, v)| (k as f64 * 0.1).sin() + v * v).collect();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let dt = 0.05;
        let lhs = frac_integrate(&combo, dt, beta).unwrap();
        let fi = frac_integrate(&f, dt, beta).unwrap();
        let gi = frac_integrate(&g, dt, beta).unwrap();
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (a * fi[k] + b * gi[k])).abs() < 1e-12);
        }
    }
}
