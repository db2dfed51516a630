//! Simulation, noise recovery and conditional-mean prediction.
//!
//! Quadrature conventions: moving-average sums use the midpoint of each
//! driver step, kernel-kernel and kernel-path integrals use the trapezoid
//! rule on the sampling grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv;
use crate::drivers::{self, DriverPath, DriverSpec};
use crate::error::{Error, Result};
use crate::kernels::CarmaModel;
use crate::linalg;
use crate::msdde::{self, DelayMeasure, SampledKernel};

const MODULE: &str = "engine";

/// Default truncation tolerance for delay integrals.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Default bound on `Σ|w_i| / Δ^j` for finite-difference derivative stencils.
pub const DEFAULT_MAX_AMPLIFICATION: f64 = 1e8;

fn same_step(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub t0: f64,
    pub dt: f64,
    /// `K×n`, row `k` at time `t0 + kΔ`.
    pub values: DMatrix<f64>,
    /// `X^{(1)}, X^{(2)}, …`, each `K×n`.
    pub derivatives: Vec<DMatrix<f64>>,
}

impl SampledPath {
    pub fn new(t0: f64, dt: f64, values: DMatrix<f64>, derivatives: Vec<DMatrix<f64>>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::invalid(MODULE, "path grid needs finite t0 and dt > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(MODULE, "path values must be finite"));
        }
        if derivatives.iter().any(|d| d.shape() != values.shape()) {
            return Err(Error::dimension(MODULE, "derivative stacks must match the value array"));
        }
        Ok(Self { t0, dt, values, derivatives })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    /// Row `k` of `X^{(order)}`; order 0 is the path itself.
    pub fn row(&self, order: usize, k: usize) -> DVector<f64> {
        let m = if order == 0 { &self.values } else { &self.derivatives[order - 1] };
        m.row(k).transpose()
    }

    /// Keeps rows `0..=k`.
    pub fn prefix(&self, k: usize) -> SampledPath {
        let rows = (k + 1).min(self.len());
        SampledPath {
            t0: self.t0,
            dt: self.dt,
            values: self.values.rows(0, rows).into_owned(),
            derivatives: self.derivatives.iter().map(|d| d.rows(0, rows).into_owned()).collect(),
        }
    }
}

/// Second-order finite-difference derivative of `values` of the given order:
/// central stencils inside, one-sided ones near the edges. Returns the
/// derivative and the noise-amplification factor `max Σ|w_i|`.
pub fn finite_difference(values: &DMatrix<f64>, dt: f64, order: usize) -> Result<(DMatrix<f64>, f64)> {
    let (k, n) = values.shape();
    let half = order.div_ceil(2);
    let one_sided = order + 2;
    if k < (2 * half + 1).max(one_sided) {
        return Err(Error::history(MODULE, format!("{k} samples are too few for a derivative of order {order}")));
    }
    let mut out = DMatrix::zeros(k, n);
    let mut amp: f64 = 0.0;
    let mut apply = |row: usize, nodes: Vec<isize>| {
        let x: Vec<f64> = nodes.iter().map(|d| *d as f64 * dt).collect();
        let w = linalg::fd_weights(0.0, &x, order);
        amp = amp.max(w.iter().map(|v| v.abs()).sum());
        for j in 0..n {
            out[(row, j)] = nodes.iter().zip(&w).map(|(d, wi)| wi * values[(((row as isize) + d) as usize, j)]).sum();
        }
    };
    for row in 0..k {
        if row >= half && row + half < k {
            apply(row, (-(half as isize)..=half as isize).collect());
        } else if row < half {
            apply(row, (0..one_sided as isize).map(|d| d - row as isize).collect());
        } else {
            let back = k - 1 - row;
            apply(row, (0..one_sided as isize).map(|d| back as isize - (one_sided as isize - 1) + d).collect());
        }
    }
    Ok((out, amp))
}

/// `X^{(0..m-1)}` at every grid point, taken from the stacks when present.
fn derivative_stack(path: &SampledPath, m: usize, max_amplification: f64) -> Result<Vec<DMatrix<f64>>> {
    let mut out = vec![path.values.clone()];
    for j in 1..m {
        if let Some(d) = path.derivatives.get(j - 1) {
            out.push(d.clone());
            continue;
        }
        let (d, amp) = finite_difference(&path.values, path.dt, j)?;
        if amp > max_amplification {
            return Err(Error::precondition(
                MODULE,
                format!("derivative of order {j} by finite differences amplifies noise by {amp:.3e} > {max_amplification:.3e}"),
            ));
        }
        if j >= 2 {
            log::warn!("derivative of order {j} estimated by finite differences (amplification {amp:.3e})");
        }
        out.push(d);
    }
    Ok(out)
}

/// `X_t = Σ_l ½(g_l + g_{l+1}) ΔZ_{k-1-l}`, the midpoint sum of `∫ g(t−u) dZ_u`.
/// Output starts `burn_in` after the driver start.
pub fn simulate_ma(kernel: &SampledKernel, driver: &DriverPath, burn_in: f64) -> Result<SampledPath> {
    if !same_step(kernel.dt(), driver.dt) {
        return Err(Error::invalid(MODULE, "kernel and driver steps differ"));
    }
    let (rows, cols) = kernel.shape();
    if cols != driver.dim() {
        return Err(Error::dimension(MODULE, "kernel columns must match the driver dimension"));
    }
    let dt = driver.dt;
    let b = (burn_in / dt).round() as usize;
    let len = kernel.len();
    if b + 1 < len {
        return Err(Error::history(
            MODULE,
            format!("burn-in {burn_in} is shorter than the kernel support {}", kernel.horizon()),
        ));
    }
    let k_steps = driver.steps();
    if b > k_steps {
        return Err(Error::history(MODULE, "driver is shorter than the burn-in"));
    }
    let vals = kernel.values();
    let half: Vec<DMatrix<f64>> = (0..len)
        .map(|l| if l + 1 < len { (&vals[l] + &vals[l + 1]) * 0.5 } else { &vals[l] * 0.5 })
        .collect();
    let dz: Vec<DMatrix<f64>> = (0..k_steps).map(|k| DMatrix::from_row_slice(cols, 1, driver.increments.row(k).transpose().as_slice())).collect();
    let full = conv::convolve_matrices(&half, &dz);
    let mut values = DMatrix::zeros(k_steps - b + 1, rows);
    for k in b..=k_steps {
        if k == 0 {
            continue;
        }
        let x = &full[k - 1];
        for i in 0..rows {
            values[(k - b, i)] = x[(i, 0)];
        }
    }
    SampledPath::new(driver.t0 + b as f64 * dt, dt, values, Vec::new())
}

/// Exact transition of the state-space representation driven by the given
/// Brownian increments.
///
/// The state noise `ξ_k = ∫ e^{A(Δ−u)} E dZ_u` over a step is jointly
/// Gaussian with the step increment `ΔZ_k`; it is drawn from its conditional
/// law given `ΔZ_k`, so the path is a functional of the supplied driver plus
/// an independent residual of order `Δ^{3/2}`.
pub fn simulate_statespace(model: &CarmaModel, driver: &DriverPath, burn_in: f64) -> Result<SampledPath> {
    simulate_statespace_from(model, driver, burn_in, None)
}

pub fn simulate_statespace_from(
    model: &CarmaModel,
    driver: &DriverPath,
    burn_in: f64,
    initial_state: Option<&DVector<f64>>,
) -> Result<SampledPath> {
    simulate_statespace_with_state(model, driver, burn_in, initial_state).map(|(path, _)| path)
}

/// As [`simulate_statespace_from`], also returning the `np`-dimensional state
/// at the last grid point.
pub fn simulate_statespace_with_state(
    model: &CarmaModel,
    driver: &DriverPath,
    burn_in: f64,
    initial_state: Option<&DVector<f64>>,
) -> Result<(SampledPath, DVector<f64>)> {
    let spec = driver.spec.as_ref().ok_or_else(|| Error::invalid(MODULE, "state-space simulation needs a Brownian driver spec"))?;
    let (sigma, mu) = match spec {
        DriverSpec::Brownian { .. } => (spec.brownian_covariance().expect("brownian"), spec.mean_rate()),
        _ => return Err(Error::invalid(MODULE, format!("state-space simulation needs a Brownian driver, got {}", spec.kind()))),
    };
    let (n, p) = (model.dim(), model.p());
    if driver.dim() != n {
        return Err(Error::dimension(MODULE, "driver dimension differs from the model"));
    }
    let np = n * p;
    if let Some(s0) = initial_state {
        if s0.len() != np {
            return Err(Error::dimension(MODULE, format!("initial state must have length {np}")));
        }
    }
    let dt = driver.dt;
    let a = model.a_companion();
    let e = model.e_stack();

    let mut a_aug = DMatrix::zeros(np + n, np + n);
    a_aug.view_mut((0, 0), (np, np)).copy_from(a);
    let mut g_aug = DMatrix::zeros(np + n, n);
    g_aug.view_mut((0, 0), (np, n)).copy_from(e);
    g_aug.view_mut((np, 0), (n, n)).fill_with_identity();
    let joint = linalg::van_loan_covariance(&a_aug, &(&g_aug * &sigma * g_aug.transpose()), dt)?;
    let s_xx = joint.view((0, 0), (np, np)).into_owned();
    let s_xz = joint.view((0, np), (np, n)).into_owned();
    let s_zz = joint.view((np, np), (n, n)).into_owned();
    let zz_pinv = s_zz
        .clone()
        .pseudo_inverse(1e-14 * s_zz.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::numerical(MODULE, e.to_string()))?;
    let gain = &s_xz * zz_pinv;
    let residual_cov = &s_xx - &gain * s_xz.transpose();
    let residual_root = linalg::psd_sqrt(&residual_cov);
    let mean_xi = linalg::coupled_integral(a, e, &DMatrix::zeros(n, n), dt)? * &mu;
    let phi = linalg::expm(&(a * dt))?;

    let m = model.order();
    let mut readout = Vec::with_capacity(m);
    let mut row = model.first_block(p);
    for _ in 0..m {
        readout.push(row.clone());
        row = row * a;
    }

    let k_steps = driver.steps();
    let b = (burn_in / dt).round() as usize;
    if b > k_steps {
        return Err(Error::history(MODULE, "driver is shorter than the burn-in"));
    }
    let rows = k_steps - b + 1;
    let mut outs = vec![DMatrix::zeros(rows, n); m];
    let mut rng = drivers::rng_for(driver.seed, driver.stream | (1 << 63));
    let mut state = initial_state.cloned().unwrap_or_else(|| DVector::zeros(np));
    let mut noise = DVector::zeros(np);
    let record = |state: &DVector<f64>, k: usize, outs: &mut Vec<DMatrix<f64>>| {
        if k >= b {
            for (j, r) in readout.iter().enumerate() {
                let x = r * state;
                for i in 0..n {
                    outs[j][(k - b, i)] = x[i];
                }
            }
        }
    };
    record(&state, 0, &mut outs);
    for k in 0..k_steps {
        for v in noise.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let dz = driver.increments.row(k).transpose() - &mu * dt;
        state = &phi * &state + &mean_xi + &gain * dz + &residual_root * &noise;
        record(&state, k + 1, &mut outs);
    }
    let values = outs.remove(0);
    Ok((SampledPath::new(driver.t0 + b as f64 * dt, dt, values, outs)?, state))
}

#[derive(Debug, Clone)]
pub struct RecoverOptions {
    pub tol: f64,
    pub max_amplification: f64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_amplification: DEFAULT_MAX_AMPLIFICATION }
    }
}

/// Recovered increments; steps without enough history for the delay integral
/// are flagged invalid and hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredNoise {
    pub path: DriverPath,
    pub valid: Vec<bool>,
}

impl RecoveredNoise {
    pub fn first_valid(&self) -> Option<usize> {
        self.valid.iter().position(|v| *v)
    }
}

/// Inverts the delay equation on the sampling grid:
/// `ΔẐ_k = ΔX^{(m−1)}_k + Σ_j C_j X^{(j)}_k Δ − (∫_0^{T_f} f(u) X_{t_k−u} du) Δ`.
pub fn recover_noise(model: &CarmaModel, path: &SampledPath, options: &RecoverOptions) -> Result<RecoveredNoise> {
    let n = model.dim();
    if path.dim() != n {
        return Err(Error::dimension(MODULE, "path dimension differs from the model"));
    }
    let dt = path.dt;
    let k_len = path.len();
    let m = model.order();
    let xs = derivative_stack(path, m, options.max_amplification)?;

    let f = if model.q() >= 1 {
        let tf = model.truncation_horizon(options.tol)?;
        let lf = (tf / dt).ceil() as usize;
        model.sample_f(dt, lf + 1)?
    } else {
        None
    };
    let lf = f.as_ref().map(|k| k.len() - 1).unwrap_or(0);
    if k_len < lf + 2 {
        return Err(Error::history(
            MODULE,
            format!("path has {k_len} samples, the delay kernel needs more than {}", lf + 1),
        ));
    }
    let memory = match &f {
        Some(fk) => {
            let seq: Vec<DMatrix<f64>> = (0..k_len).map(|k| DMatrix::from_row_slice(n, 1, path.values.row(k).transpose().as_slice())).collect();
            Some(conv::convolve_matrices(fk.values(), &seq))
        }
        None => None,
    };

    let steps = k_len - 1;
    let mut increments = DMatrix::from_element(steps, n, f64::NAN);
    let mut valid = vec![false; steps];
    let top = &xs[m - 1];
    for k in 0..steps {
        if k < lf {
            continue;
        }
        let mut dz: DVector<f64> = (top.row(k + 1) - top.row(k)).transpose();
        for (j, cj) in model.c_coeffs().iter().enumerate() {
            dz += cj * xs[j].row(k).transpose() * dt;
        }
        if let (Some(mem), Some(fk)) = (&memory, &f) {
            let vals = fk.values();
            let x_now = path.values.row(k).transpose();
            let x_far = path.values.row(k - lf).transpose();
            let trap = (&mem[k] - (&vals[0] * x_now + &vals[lf] * x_far) * 0.5) * dt;
            dz -= trap.column(0) * dt;
        }
        increments.row_mut(k).copy_from(&dz.transpose());
        valid[k] = true;
    }
    let driver = DriverPath { t0: path.t0, dt, increments, seed: 0, stream: 0, spec: None };
    Ok(RecoveredNoise { path: driver, valid })
}

/// Noise input of the predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseMean {
    /// Lévy driver: `Ẑ_u = (u − s) E[Z_1]`.
    MeanRate(DVector<f64>),
    /// `Ẑ` at every horizon node, starting with `Ẑ_s = 0`.
    Samples(Vec<DVector<f64>>),
}

/// Uniform horizon `t_k = s + k·step`, `k = 0..=count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub step: f64,
    pub count: usize,
}

impl Horizon {
    pub fn times(&self, s: f64) -> Vec<f64> {
        (0..=self.count).map(|k| s + k as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub s: f64,
    pub times: Vec<f64>,
    /// `(count+1)×d` conditional means.
    pub mean: DMatrix<f64>,
    /// Contribution of the state at `s`.
    pub term1: DMatrix<f64>,
    /// Delay-memory contribution of the path before `s`.
    pub term2: DMatrix<f64>,
    /// Contribution of the predicted noise.
    pub term3: DMatrix<f64>,
}

impl PredictionResult {
    fn assemble(s: f64, times: Vec<f64>, term1: DMatrix<f64>, term2: DMatrix<f64>, term3: DMatrix<f64>) -> Self {
        let mean = &term1 + &term2 + &term3;
        Self { s, times, mean, term1, term2, term3 }
    }
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub tol: f64,
    pub max_amplification: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_amplification: DEFAULT_MAX_AMPLIFICATION }
    }
}

/// Derivatives of order `0..m` at the last sample, one-sided second-order
/// stencils when the stacks are absent.
fn derivatives_at_end(path: &SampledPath, m: usize, max_amplification: f64) -> Result<Vec<DVector<f64>>> {
    let last = path.len() - 1;
    let mut out = vec![path.row(0, last)];
    for j in 1..m {
        if j <= path.derivatives.len() {
            out.push(path.row(j, last));
            continue;
        }
        let width = j + 2;
        if path.len() < width {
            return Err(Error::history(MODULE, format!("derivative of order {j} needs {width} samples")));
        }
        let nodes: Vec<f64> = (0..width).map(|i| -((width - 1 - i) as f64) * path.dt).collect();
        let w = linalg::fd_weights(0.0, &nodes, j);
        let amp: f64 = w.iter().map(|v| v.abs()).sum();
        if amp > max_amplification {
            return Err(Error::precondition(MODULE, format!("one-sided derivative of order {j} amplifies noise by {amp:.3e}")));
        }
        let mut d = DVector::zeros(path.dim());
        for (i, wi) in w.iter().enumerate() {
            d += path.row(0, last + 1 - width + i) * *wi;
        }
        out.push(d);
    }
    Ok(out)
}

/// Iterates `x_{k+1} = M x_k` with `M = exp([[A, G], [0, B]] h)` and records
/// the top block, which equals `e^{Akh} x_top + ∫_0^{kh} e^{A(kh−w)} G e^{Bw} dw x_bottom`.
fn augmented_orbit(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: f64,
    top: DVector<f64>,
    bottom: DVector<f64>,
    count: usize,
) -> Result<Vec<DVector<f64>>> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut big = DMatrix::zeros(na + nb, na + nb);
    big.view_mut((0, 0), (na, na)).copy_from(a);
    big.view_mut((0, na), (na, nb)).copy_from(g);
    big.view_mut((na, na), (nb, nb)).copy_from(b);
    let step = linalg::expm(&(big * h))?;
    let mut x = DVector::zeros(na + nb);
    x.rows_mut(0, na).copy_from(&top);
    x.rows_mut(na, nb).copy_from(&bottom);
    let mut out = Vec::with_capacity(count + 1);
    for _ in 0..=count {
        out.push(x.rows(0, na).into_owned());
        x = &step * x;
    }
    Ok(out)
}

/// Conditional mean `E[X_t | X_u, u ≤ s]` of a CARMA process, `s` being the
/// last time of `history`:
/// `Σ_j g̃_j(t−s) X_s^{(j−1)} + ∫_{−∞}^s ∫_s^t g̃(t−u) f(u−v) du X_v dv + g̃∗{Ẑ1_{(s,∞)}}(t)`.
///
/// The inner `u`-integral is evaluated exactly through an augmented matrix
/// exponential; the outer `v`-integral is a trapezoid over `[s − T_f, s]`.
pub fn predict(
    model: &CarmaModel,
    history: &SampledPath,
    horizon: Horizon,
    noise: &NoiseMean,
    options: &PredictOptions,
) -> Result<PredictionResult> {
    let (n, p, q, m) = (model.dim(), model.p(), model.q(), model.order());
    if history.dim() != n {
        return Err(Error::dimension(MODULE, "history dimension differs from the model"));
    }
    if history.is_empty() {
        return Err(Error::history(MODULE, "empty history"));
    }
    if !(horizon.step > 0.0) {
        return Err(Error::invalid(MODULE, "horizon step must be positive"));
    }
    let s = history.end_time();
    let h = horizon.step;
    let a = model.a_companion();
    let e1p = model.first_block(p);
    let np = n * p;
    let rows = horizon.count + 1;
    let to_rows = |vs: Vec<DVector<f64>>| {
        let mut out = DMatrix::zeros(rows, n);
        for (k, v) in vs.iter().enumerate() {
            out.row_mut(k).copy_from(&(&e1p * v).transpose());
        }
        out
    };

    let derivs = derivatives_at_end(history, m, options.max_amplification)?;
    let mut v = DVector::zeros(np);
    for j in 1..=m {
        v += model.gtilde_j_weight(j)? * &derivs[j - 1];
    }
    let zero_n = DMatrix::zeros(n, n);
    let term1 = to_rows(augmented_orbit(a, &DMatrix::zeros(np, n), &zero_n, h, v, DVector::zeros(n), horizon.count)?);

    let term2 = match (model.b_companion(), model.f_stack()) {
        (Some(bc), Some(fs)) => {
            let dt = history.dt;
            let lf = (model.truncation_horizon(options.tol)? / dt).ceil() as usize;
            if history.len() < lf + 1 {
                return Err(Error::history(
                    MODULE,
                    format!("history has {} samples, the delay memory needs {}", history.len(), lf + 1),
                ));
            }
            let last = history.len() - 1;
            let step_b = linalg::expm(&(bc * dt))?;
            let mut weight = fs.clone();
            let mut memory = DVector::zeros(n * q);
            for l in 0..=lf {
                let w = if l == 0 || l == lf { 0.5 } else { 1.0 };
                memory += &weight * history.row(0, last - l) * (w * dt);
                weight = &step_b * weight;
            }
            let coupling = model.e_stack() * model.first_block(q);
            to_rows(augmented_orbit(a, &coupling, bc, h, DVector::zeros(np), memory, horizon.count)?)
        }
        _ => DMatrix::zeros(rows, n),
    };

    let term3 = match noise {
        NoiseMean::MeanRate(mu) => {
            if mu.len() != n {
                return Err(Error::dimension(MODULE, "mean rate dimension differs from the model"));
            }
            let g = model.e_stack() * mu;
            to_rows(augmented_orbit(
                a,
                &DMatrix::from_column_slice(np, 1, g.as_slice()),
                &DMatrix::zeros(1, 1),
                h,
                DVector::zeros(np),
                DVector::from_element(1, 1.0),
                horizon.count,
            )?)
        }
        NoiseMean::Samples(zhat) => {
            if zhat.len() != rows || zhat.iter().any(|z| z.len() != n) {
                return Err(Error::dimension(MODULE, format!("noise samples must be {rows} vectors of length {n}")));
            }
            let step = linalg::expm(&(a * h))?;
            let mut flows = Vec::with_capacity(rows);
            let mut phi_e = model.e_stack().clone();
            for _ in 0..rows {
                flows.push(&e1p * a * &phi_e);
                phi_e = &step * phi_e;
            }
            let mut out = DMatrix::zeros(rows, n);
            for k in 0..rows {
                let mut acc = if m == 1 { zhat[k].clone() } else { DVector::zeros(n) };
                for l in 0..=k {
                    let w = if k == 0 { 0.0 } else if l == 0 || l == k { 0.5 } else { 1.0 };
                    if w != 0.0 {
                        acc += &flows[k - l] * &zhat[l] * (w * h);
                    }
                }
                out.row_mut(k).copy_from(&acc.transpose());
            }
            out
        }
    };

    Ok(PredictionResult::assemble(s, horizon.times(s), term1, term2, term3))
}

/// `Ẑ` samples of a Lévy driver on a horizon: `Ẑ_{s+kh} = kh·E[Z_1]`.
pub fn levy_noise_samples(mean_rate: &DVector<f64>, horizon: Horizon) -> Vec<DVector<f64>> {
    (0..=horizon.count).map(|k| mean_rate * (k as f64 * horizon.step)).collect()
}

/// Stacks `X^{(0..m-1)}` of a path into the state of a nested system.
fn stacked_history(history: &SampledPath, dim: usize, max_amplification: f64) -> Result<DMatrix<f64>> {
    let n = history.dim();
    if dim == n {
        return Ok(history.values.clone());
    }
    if dim % n != 0 {
        return Err(Error::dimension(MODULE, "measure dimension is not a multiple of the path dimension"));
    }
    let m = dim / n;
    let stack = derivative_stack(history, m, max_amplification)?;
    let mut out = DMatrix::zeros(history.len(), dim);
    for (j, d) in stack.iter().enumerate() {
        out.view_mut((0, j * n), (history.len(), n)).copy_from(d);
    }
    Ok(out)
}

/// Conditional mean for a general delay equation with solution kernel `g`:
/// `g(t−s)X_s + ∫_s^t g(t−u) η∗{1_{(−∞,s]}X}(u) du + ∫ g(dv) Ẑ_{t−v}1_{t−v>s}`.
///
/// The horizon uses the kernel's grid step. For a nested system of dimension
/// `mn`, the history is stacked with its derivatives and the full state is
/// predicted.
pub fn predict_msdde(
    eta: &DelayMeasure,
    g: &SampledKernel,
    history: &SampledPath,
    zhat: Option<&[DVector<f64>]>,
    steps: usize,
    options: &PredictOptions,
) -> Result<PredictionResult> {
    let d = eta.dim();
    if g.shape() != (d, d) {
        return Err(Error::dimension(MODULE, "kernel and measure dimensions differ"));
    }
    if !same_step(g.dt(), history.dt) {
        return Err(Error::invalid(MODULE, "kernel and history steps differ"));
    }
    if history.is_empty() {
        return Err(Error::history(MODULE, "empty history"));
    }
    let dt = g.dt();
    let x = stacked_history(history, d, options.max_amplification)?;
    let last = x.nrows() - 1;
    let s = history.end_time();
    let support = eta.delay_support(options.tol)?;
    let ld = (support / dt - 1e-9).ceil().max(0.0) as usize;
    if last < ld {
        return Err(Error::history(MODULE, format!("history covers {} steps, the delay needs {ld}", last)));
    }
    let x_back = |offset: f64| -> DVector<f64> {
        // X at time s − offset, offset ≥ 0, linear interpolation
        let pos = offset / dt;
        let k = pos.floor() as usize;
        let w = pos - k as f64;
        let a = x.row(last - k.min(last)).transpose();
        if w == 0.0 || k + 1 > last {
            a
        } else {
            a * (1.0 - w) + x.row(last - k - 1).transpose() * w
        }
    };
    let rows = steps + 1;
    let kernel_at = |k: usize| -> DMatrix<f64> {
        if k < g.len() { g.values()[k].clone() } else { DMatrix::zeros(d, d) }
    };

    let xs = x.row(last).transpose();
    let mut term1 = DMatrix::zeros(rows, d);
    for k in 0..rows {
        term1.row_mut(k).copy_from(&(kernel_at(k) * &xs).transpose());
    }

    let dens = if eta.densities().is_empty() { None } else { Some(eta.density_samples(dt, ld + 1)?) };
    let mut memory = Vec::with_capacity(rows);
    for j in 0..rows {
        let shift = j as f64 * dt;
        let mut acc = DVector::zeros(d);
        for (loc, w) in eta.atoms() {
            let active = if j == 0 { *loc > 0.0 } else { *loc >= shift - 1e-12 * dt };
            if active {
                acc += w * x_back((loc - shift).max(0.0));
            }
        }
        if let Some(ds) = &dens {
            if j <= ld {
                for l in j..=ld {
                    let wt = if l == j || l == ld { 0.5 } else { 1.0 };
                    if l == j && l == ld {
                        continue;
                    }
                    acc += &ds[l] * x.row(last - (l - j)).transpose() * (wt * dt);
                }
            }
        }
        memory.push(acc);
    }
    let mut term2 = DMatrix::zeros(rows, d);
    for k in 1..rows {
        let mut acc = DVector::zeros(d);
        for j in 0..=k {
            let wt = if j == 0 || j == k { 0.5 } else { 1.0 };
            acc += kernel_at(k - j) * &memory[j] * (wt * dt);
        }
        term2.row_mut(k).copy_from(&acc.transpose());
    }

    let mut term3 = DMatrix::zeros(rows, d);
    if let Some(z) = zhat {
        if z.len() != rows || z.iter().any(|v| v.len() != d) {
            return Err(Error::dimension(MODULE, format!("noise samples must be {rows} vectors of length {d}")));
        }
        let gk = SampledKernel::new(dt, (0..rows).map(kernel_at).collect(), g.atom_at_zero().clone())?;
        let geta = msdde::kernel_measure_density(&gk, eta)?;
        for k in 0..rows {
            let mut acc = z[k].clone();
            for l in 0..=k {
                let wt = if k == 0 { 0.0 } else if l == 0 || l == k { 0.5 } else { 1.0 };
                if wt != 0.0 {
                    acc += &geta[l] * &z[k - l] * (wt * dt);
                }
            }
            term3.row_mut(k).copy_from(&acc.transpose());
        }
    }
    let times = (0..rows).map(|k| s + k as f64 * dt).collect();
    Ok(PredictionResult::assemble(s, times, term1, term2, term3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::gen_levy;
    use crate::msdde::kernel_fft;

    fn bm(sigma: f64) -> DriverSpec {
        DriverSpec::Brownian { drift: vec![0.0], vol: vec![sigma], correlation: None }
    }

    fn ou() -> CarmaModel {
        CarmaModel::scalar(&[2.0], &[]).unwrap()
    }

    fn carma21() -> CarmaModel {
        CarmaModel::scalar(&[4.0, 3.0], &[2.0]).unwrap()
    }

    #[test]
    fn finite_difference_is_second_order() {
        let dt = 0.01;
        let vals = DMatrix::from_fn(200, 1, |k, _| (k as f64 * dt).sin());
        let (d1, _) = finite_difference(&vals, dt, 1).unwrap();
        let (d2, _) = finite_difference(&vals, dt, 2).unwrap();
        for k in [0usize, 50, 199] {
            let t = k as f64 * dt;
            assert!((d1[(k, 0)] - t.cos()).abs() < 1e-3);
            assert!((d2[(k, 0)] + t.sin()).abs() < 5e-3);
        }
    }

    #[test]
    fn zero_driver_gives_zero_path() {
        let model = carma21();
        let kernel = model.sample_gtilde(0.01, 2001).unwrap();
        let driver = DriverPath {
            t0: 0.0,
            dt: 0.01,
            increments: DMatrix::zeros(6000, 1),
            seed: 0,
            stream: 0,
            spec: Some(bm(0.0)),
        };
        let x = simulate_ma(&kernel, &driver, 20.0).unwrap();
        assert!(x.values.iter().all(|v| *v == 0.0));
        let rec = recover_noise(&model, &x, &RecoverOptions::default()).unwrap();
        assert!(rec.path.increments.iter().zip(&rec.valid).all(|(v, ok)| !ok || *v == 0.0));
        assert!(simulate_ma(&kernel, &driver, 5.0).is_err());
    }

    #[test]
    fn ou_statespace_lag_correlation() {
        let dt = 0.05;
        let driver = gen_levy(&bm(1.0), 0.0, dt, 200_000, 11).unwrap();
        let x = simulate_statespace(&ou(), &driver, 10.0).unwrap();
        let v: Vec<f64> = x.values.column(0).iter().copied().collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let cov = v.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((cov / var - (-2.0 * dt).exp()).abs() < 0.01);
        assert!((var - 0.25).abs() < 0.25 * 0.05, "{var}");
    }

    #[test]
    fn deterministic_flow_from_initial_state() {
        let model = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap();
        let driver = DriverPath { t0: 0.0, dt: 0.1, increments: DMatrix::zeros(30, 1), seed: 0, stream: 0, spec: Some(bm(0.0)) };
        let s0 = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let x = simulate_statespace_from(&model, &driver, 0.0, Some(&s0)).unwrap();
        for k in [0usize, 10, 30] {
            let t = k as f64 * 0.1;
            let expect = (linalg::expm(&(model.a_companion() * t)).unwrap() * &s0)[0];
            assert!((x.values[(k, 0)] - expect).abs() < 1e-12);
        }
        assert_eq!(x.derivatives.len(), 1);
    }

    #[test]
    fn statespace_rejects_non_brownian() {
        let spec = DriverSpec::GammaDifference { shape: vec![1.0], scale: vec![1.0] };
        let driver = gen_levy(&spec, 0.0, 0.1, 10, 0).unwrap();
        assert!(simulate_statespace(&ou(), &driver, 0.0).is_err());
    }

    #[test]
    fn ou_recovery_roundtrip() {
        let dt = 1.0 / 256.0;
        let driver = gen_levy(&bm(1.0), 0.0, dt, 40_000, 5).unwrap();
        let x = simulate_statespace(&ou(), &driver, 5.0).unwrap();
        let rec = recover_noise(&ou(), &x, &RecoverOptions::default()).unwrap();
        let b = (5.0 / dt) as usize;
        let truth: Vec<f64> = (0..rec.path.steps()).map(|k| driver.increments[(b + k, 0)]).collect();
        let est = rec.path.column(0);
        let corr = correlation(&truth, &est);
        assert!(corr > 0.99, "{corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn recovery_masks_warm_up() {
        let model = carma21();
        let dt = 1.0 / 64.0;
        let driver = gen_levy(&bm(1.0), 0.0, dt, 4000, 5).unwrap();
        let x = simulate_statespace(&model, &driver, 20.0).unwrap();
        let rec = recover_noise(&model, &x, &RecoverOptions::default()).unwrap();
        let first = rec.first_valid().unwrap();
        assert!(first > 0);
        assert!(rec.path.increments[(0, 0)].is_nan());
        assert!(rec.valid[first..].iter().all(|v| *v));
    }

    #[test]
    fn ou_prediction_is_exponential_decay() {
        let dt = 0.01;
        let history = SampledPath::new(0.0, dt, DMatrix::from_fn(100, 1, |k, _| (k as f64 * 0.1).sin()), vec![]).unwrap();
        let xs = history.values[(99, 0)];
        let hz = Horizon { step: 0.05, count: 40 };
        let res = predict(&ou(), &history, hz, &NoiseMean::MeanRate(DVector::zeros(1)), &PredictOptions::default()).unwrap();
        for k in 0..=40 {
            let tau = k as f64 * 0.05;
            assert!((res.mean[(k, 0)] - (-2.0 * tau).exp() * xs).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_continuous_at_s() {
        let model = CarmaModel::scalar(&[3.0, 3.0, 1.0], &[2.0]).unwrap();
        let dt = 1.0 / 64.0;
        let driver = gen_levy(&bm(1.0), 0.0, dt, 4000, 2).unwrap();
        let path = simulate_statespace(&model, &driver, 20.0).unwrap();
        let hz = Horizon { step: 0.01, count: 3 };
        let res = predict(&model, &path, hz, &NoiseMean::MeanRate(DVector::zeros(1)), &PredictOptions::default()).unwrap();
        let xs = path.values[(path.len() - 1, 0)];
        // the delay term vanishes at t = s and g̃_j(0) telescopes to X_s
        assert!((res.mean[(0, 0)] - xs).abs() < 1e-6, "{} vs {xs}", res.mean[(0, 0)]);
    }

    #[test]
    fn ou_tower_property() {
        let model = ou();
        let history = SampledPath::new(0.0, 0.01, DMatrix::from_element(10, 1, 0.8), vec![]).unwrap();
        let mu = NoiseMean::MeanRate(DVector::from_element(1, 0.3));
        let opts = PredictOptions::default();
        let direct = predict(&model, &history, Horizon { step: 0.1, count: 10 }, &mu, &opts).unwrap();
        let mid = predict(&model, &history, Horizon { step: 0.1, count: 4 }, &mu, &opts).unwrap();
        let restart = SampledPath::new(0.0, 0.01, DMatrix::from_element(1, 1, mid.mean[(4, 0)]), vec![]).unwrap();
        let second = predict(&model, &restart, Horizon { step: 0.1, count: 6 }, &mu, &opts).unwrap();
        assert!((second.mean[(6, 0)] - direct.mean[(10, 0)]).abs() < 1e-8);
    }

    #[test]
    fn levy_mean_matches_samples_route() {
        let model = carma21();
        let dt = 1.0 / 128.0;
        let history = SampledPath::new(0.0, dt, DMatrix::from_fn(4000, 1, |k, _| (k as f64 * 0.01).cos()), vec![]).unwrap();
        let hz = Horizon { step: dt, count: 256 };
        let mu = DVector::from_element(1, 0.7);
        let opts = PredictOptions::default();
        let exact = predict(&model, &history, hz, &NoiseMean::MeanRate(mu.clone()), &opts).unwrap();
        let sampled = predict(&model, &history, hz, &NoiseMean::Samples(levy_noise_samples(&mu, hz)), &opts).unwrap();
        assert!((exact.term3.clone() - sampled.term3).amax() < 1e-4);
    }

    #[test]
    fn msdde_prediction_matches_ou() {
        let dt = 1.0 / 256.0;
        let eta = DelayMeasure::atom_only(1, 0.0, DMatrix::from_element(1, 1, -2.0)).unwrap();
        let g = kernel_fft(&eta, dt, 1 << 16).unwrap().kernel;
        let history = SampledPath::new(0.0, dt, DMatrix::from_element(50, 1, 1.3), vec![]).unwrap();
        let steps = 512;
        let res = predict_msdde(&eta, &g, &history, None, steps, &PredictOptions::default()).unwrap();
        let ref_res = predict(
            &ou(),
            &history,
            Horizon { step: dt, count: steps },
            &NoiseMean::MeanRate(DVector::zeros(1)),
            &PredictOptions::default(),
        )
        .unwrap();
        assert!((res.mean - ref_res.mean).amax() < 1e-4);
        assert!(res.term2.amax() == 0.0);
    }
}
