//! Driving noise: Lévy increments and fractional Lévy processes built from a
//! Brownian base by a right-sided Riemann–Liouville moving average.
//!
//! Every path owns one random stream, `ChaCha8(seed)` on stream `stream`, so
//! replicates drawn with distinct stream indices never overlap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::gamma;

use crate::conv;
use crate::error::{Error, Result};
use crate::linalg;

const MODULE: &str = "drivers";

/// History extension for fractional drivers, in multiples of the output span.
pub const DEFAULT_EXTENSION_FACTOR: usize = 64;

/// Largest share of the per-step standard deviation the truncated history may omit.
pub const TAIL_STD_SHARE: f64 = 0.01;

const MAX_HISTORY_CELLS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub enum DriverSpec {
    /// Drift `μ`, volatilities `σ` and a correlation matrix (identity if absent).
    Brownian { drift: Vec<f64>, vol: Vec<f64>, correlation: Option<DMatrix<f64>> },
    /// Independent coordinates with normal jump sizes.
    CompoundPoisson { rate: Vec<f64>, jump_mean: Vec<f64>, jump_std: Vec<f64> },
    /// Difference of two independent gamma processes per coordinate.
    GammaDifference { shape: Vec<f64>, scale: Vec<f64> },
    /// `Z^j_t = Γ(1+β_j)^{-1} ∫ [(t−u)_+^{β_j} − (−u)_+^{β_j}] dL^j_u`.
    Fractional { base: Box<DriverSpec>, beta: Vec<f64> },
}

impl DriverSpec {
    pub fn dim(&self) -> usize {
        match self {
            DriverSpec::Brownian { vol, .. } => vol.len(),
            DriverSpec::CompoundPoisson { rate, .. } => rate.len(),
            DriverSpec::GammaDifference { shape, .. } => shape.len(),
            DriverSpec::Fractional { beta, .. } => beta.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DriverSpec::Brownian { .. } => "brownian",
            DriverSpec::CompoundPoisson { .. } => "compound_poisson",
            DriverSpec::GammaDifference { .. } => "gamma_difference",
            DriverSpec::Fractional { .. } => "fractional",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::invalid(MODULE, "driver dimension must be positive"));
        }
        let same = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != n {
                return Err(Error::dimension(MODULE, format!("{name} has length {}, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(MODULE, format!("{name} must be finite")));
            }
            Ok(())
        };
        match self {
            DriverSpec::Brownian { drift, vol, correlation } => {
                same("drift", drift)?;
                same("vol", vol)?;
                if vol.iter().any(|v| *v < 0.0) {
                    return Err(Error::invalid(MODULE, "volatility must be non-negative"));
                }
                if let Some(c) = correlation {
                    if c.shape() != (n, n) {
                        return Err(Error::dimension(MODULE, format!("correlation must be {n}x{n}")));
                    }
                    let sym = (c - c.transpose()).amax();
                    let diag_ok = (0..n).all(|i| (c[(i, i)] - 1.0).abs() < 1e-12);
                    let min_eig = c.clone().symmetric_eigen().eigenvalues.min();
                    if sym > 1e-12 || !diag_ok || min_eig < -1e-12 {
                        return Err(Error::invalid(MODULE, "correlation must be symmetric, unit-diagonal and positive semi-definite"));
                    }
                }
            }
            DriverSpec::CompoundPoisson { rate, jump_mean, jump_std } => {
                same("rate", rate)?;
                same("jump_mean", jump_mean)?;
                same("jump_std", jump_std)?;
                if rate.iter().any(|v| *v < 0.0) || jump_std.iter().any(|v| *v < 0.0) {
                    return Err(Error::invalid(MODULE, "rate and jump_std must be non-negative"));
                }
            }
            DriverSpec::GammaDifference { shape, scale } => {
                same("shape", shape)?;
                same("scale", scale)?;
                if shape.iter().chain(scale).any(|v| *v <= 0.0) {
                    return Err(Error::invalid(MODULE, "gamma shape and scale must be positive"));
                }
            }
            DriverSpec::Fractional { base, beta } => {
                same("beta", beta)?;
                if beta.iter().any(|b| !(*b > 0.0 && *b < 0.5)) {
                    return Err(Error::invalid(MODULE, "beta must lie in (0, 1/2)"));
                }
                match base.as_ref() {
                    DriverSpec::Brownian { drift, .. } => {
                        base.validate()?;
                        if base.dim() != n {
                            return Err(Error::dimension(MODULE, "fractional base dimension differs from beta"));
                        }
                        if drift.iter().any(|m| *m != 0.0) {
                            return Err(Error::invalid(MODULE, "fractional base must have zero mean"));
                        }
                    }
                    _ => return Err(Error::invalid(MODULE, "fractional base must be Brownian")),
                }
            }
        }
        Ok(())
    }

    /// `E[Z_1]`.
    pub fn mean_rate(&self) -> DVector<f64> {
        match self {
            DriverSpec::Brownian { drift, .. } => DVector::from_vec(drift.clone()),
            DriverSpec::CompoundPoisson { rate, jump_mean, .. } => {
                DVector::from_iterator(rate.len(), rate.iter().zip(jump_mean).map(|(l, m)| l * m))
            }
            DriverSpec::GammaDifference { shape, .. } => DVector::zeros(shape.len()),
            DriverSpec::Fractional { beta, .. } => DVector::zeros(beta.len()),
        }
    }

    /// Covariance of `Z_1` for the Brownian kind.
    pub fn brownian_covariance(&self) -> Option<DMatrix<f64>> {
        match self {
            DriverSpec::Brownian { vol, correlation, .. } => {
                let n = vol.len();
                let rho = correlation.clone().unwrap_or_else(|| DMatrix::identity(n, n));
                let d = DMatrix::from_diagonal(&DVector::from_vec(vol.clone()));
                Some(&d * rho * &d)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverPath {
    pub t0: f64,
    pub dt: f64,
    /// `K×n`; row `k` is `Z_{t0+(k+1)Δ} − Z_{t0+kΔ}`.
    pub increments: DMatrix<f64>,
    pub seed: u64,
    pub stream: u64,
    pub spec: Option<DriverSpec>,
}

impl DriverPath {
    pub fn steps(&self) -> usize {
        self.increments.nrows()
    }

    pub fn dim(&self) -> usize {
        self.increments.ncols()
    }

    /// `Z_{t0+kΔ} − Z_{t0}` for `k = 0..=K`.
    pub fn cumulative(&self) -> DMatrix<f64> {
        let (k, n) = self.increments.shape();
        let mut out = DMatrix::zeros(k + 1, n);
        for i in 0..k {
            for j in 0..n {
                out[(i + 1, j)] = out[(i, j)] + self.increments[(i, j)];
            }
        }
        out
    }

    /// Increments of a single coordinate.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.increments.column(j).iter().copied().collect()
    }
}

/// Random stream for path `stream` of the master seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_grid(dt: f64, steps: usize) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(MODULE, "grid step must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid(MODULE, "at least one step is required"));
    }
    Ok(())
}

fn brownian_increments(drift: &[f64], cov: &DMatrix<f64>, dt: f64, steps: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = drift.len();
    let root = linalg::psd_sqrt(cov) * dt.sqrt();
    let mut out = DMatrix::zeros(steps, n);
    let mut z = DVector::zeros(n);
    for k in 0..steps {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &root * &z;
        for j in 0..n {
            out[(k, j)] = drift[j] * dt + x[j];
        }
    }
    out
}

/// Lévy increments with the exact step-`Δ` law, on stream 0.
pub fn gen_levy(spec: &DriverSpec, t0: f64, dt: f64, steps: usize, seed: u64) -> Result<DriverPath> {
    gen_levy_stream(spec, t0, dt, steps, seed, 0)
}

pub fn gen_levy_stream(spec: &DriverSpec, t0: f64, dt: f64, steps: usize, seed: u64, stream: u64) -> Result<DriverPath> {
    spec.validate()?;
    check_grid(dt, steps)?;
    let mut rng = rng_for(seed, stream);
    let n = spec.dim();
    let increments = match spec {
        DriverSpec::Brownian { drift, .. } => {
            let cov = spec.brownian_covariance().expect("brownian");
            brownian_increments(drift, &cov, dt, steps, &mut rng)
        }
        DriverSpec::CompoundPoisson { rate, jump_mean, jump_std } => {
            let mut out = DMatrix::zeros(steps, n);
            let laws: Vec<Option<Poisson<f64>>> = rate
                .iter()
                .map(|l| if l * dt > 0.0 { Poisson::new(l * dt).ok() } else { None })
                .collect();
            for k in 0..steps {
                for j in 0..n {
                    if let Some(law) = &laws[j] {
                        let count: f64 = law.sample(&mut rng);
                        if count > 0.0 {
                            let z: f64 = rng.sample(StandardNormal);
                            out[(k, j)] = count * jump_mean[j] + jump_std[j] * count.sqrt() * z;
                        }
                    }
                }
            }
            out
        }
        DriverSpec::GammaDifference { shape, scale } => {
            let mut out = DMatrix::zeros(steps, n);
            let laws: Vec<Gamma<f64>> = shape
                .iter()
                .zip(scale)
                .map(|(a, s)| Gamma::new(a * dt, *s).map_err(|e| Error::invalid(MODULE, e.to_string())))
                .collect::<Result<_>>()?;
            for k in 0..steps {
                for j in 0..n {
                    out[(k, j)] = laws[j].sample(&mut rng) - laws[j].sample(&mut rng);
                }
            }
            out
        }
        DriverSpec::Fractional { .. } => {
            return Err(Error::invalid(MODULE, "use gen_fractional for fractional drivers"));
        }
    };
    Ok(DriverPath { t0, dt, increments, seed, stream, spec: Some(spec.clone()) })
}

fn frac_cell_weights(beta: f64, dt: f64, len: usize) -> Vec<f64> {
    let g = gamma(beta + 1.0);
    (0..len)
        .map(|d| ((((d + 1) as f64) * dt).powf(beta) - ((d as f64) * dt).powf(beta)) / g)
        .collect()
}

/// Right-sided Riemann–Liouville integral `I^β₋f(t) = Γ(β)^{-1} ∫_t^∞ f(u)(u−t)^{β−1} du`
/// at the nodes `t_j = jΔ`, where `values[k]` is the constant value of `f` on
/// `[kΔ, (k+1)Δ)` and `f` vanishes past the last cell. The power kernel is
/// integrated exactly over each cell.
pub fn frac_integrate(values: &[f64], dt: f64, beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(MODULE, "beta must lie in (0, 1)"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(MODULE, "grid step must be positive"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let c = frac_cell_weights(beta, dt, values.len());
    let rev: Vec<f64> = values.iter().rev().copied().collect();
    let full = conv::convolve(&rev, &c);
    let len = values.len();
    // out_j = Σ_{k≥j} v_k c_{k−j} = (rev ∗ c)[len−1−j]
    Ok((0..len).map(|j| full[len - 1 - j]).collect())
}

/// Weights `w_d` mapping base cell increments to fractional increments,
/// `ΔZ_k = Σ_d w_d ΔL_{k−d}`, with each base increment spread uniformly over
/// its cell.
pub fn fractional_step_weights(beta: f64, dt: f64, len: usize) -> Vec<f64> {
    let g = gamma(2.0 + beta);
    let scale = dt.powf(beta) / g;
    let p = beta + 1.0;
    (0..len)
        .map(|d| {
            let d = d as f64;
            let prev = if d >= 1.0 { (d - 1.0).powf(p) } else { 0.0 };
            scale * ((d + 1.0).powf(p) - 2.0 * d.powf(p) + prev)
        })
        .collect()
}

/// Relative shortfall of the per-step standard deviation when lags beyond
/// `lags` are dropped; the omitted tail is summed from the `d^{β−1}`
/// asymptote of the weights.
pub fn fractional_tail_share(beta: f64, lags: usize) -> f64 {
    let w = fractional_step_weights(beta, 1.0, lags + 1);
    let kept: f64 = w.iter().map(|v| v * v).sum();
    let g = gamma(1.0 + beta);
    let tail = beta * beta / (g * g) * (lags as f64 + 0.5).powf(2.0 * beta - 1.0) / (1.0 - 2.0 * beta);
    1.0 - (kept / (kept + tail)).sqrt()
}

/// Number of history cells, starting at `factor·steps` and doubling until
/// the omitted tail is below [`TAIL_STD_SHARE`] for every coordinate.
pub fn fractional_history(beta: &[f64], steps: usize, factor: usize) -> usize {
    let mut cells = (factor * steps).max(1);
    while cells < MAX_HISTORY_CELLS && beta.iter().any(|b| fractional_tail_share(*b, cells) >= TAIL_STD_SHARE) {
        cells *= 2;
    }
    if beta.iter().any(|b| fractional_tail_share(*b, cells) >= TAIL_STD_SHARE) {
        log::warn!("fractional history capped at {cells} cells; tail share above {TAIL_STD_SHARE}");
    }
    cells
}

pub fn gen_fractional(spec: &DriverSpec, t0: f64, dt: f64, steps: usize, seed: u64) -> Result<DriverPath> {
    gen_fractional_stream(spec, t0, dt, steps, seed, 0, DEFAULT_EXTENSION_FACTOR)
}

/// Fractional increments on `[t0, t0+KΔ]` from base increments simulated on
/// `[t0 − T_ext, t0 + KΔ]`.
pub fn gen_fractional_stream(
    spec: &DriverSpec,
    t0: f64,
    dt: f64,
    steps: usize,
    seed: u64,
    stream: u64,
    extension_factor: usize,
) -> Result<DriverPath> {
    spec.validate()?;
    check_grid(dt, steps)?;
    let (base, beta) = match spec {
        DriverSpec::Fractional { base, beta } => (base, beta),
        _ => return Err(Error::invalid(MODULE, "gen_fractional needs a fractional spec")),
    };
    let cov = base.brownian_covariance().expect("validated Brownian base");
    let n = beta.len();
    let history = fractional_history(beta, steps, extension_factor);
    let total = history + steps;
    let mut rng = rng_for(seed, stream);
    let base_inc = brownian_increments(&vec![0.0; n], &cov, dt, total, &mut rng);
    let mut increments = DMatrix::zeros(steps, n);
    for j in 0..n {
        let w = fractional_step_weights(beta[j], dt, total);
        let col: Vec<f64> = base_inc.column(j).iter().copied().collect();
        let z = conv::convolve(&col, &w);
        for k in 0..steps {
            increments[(k, j)] = z[history + k];
        }
    }
    Ok(DriverPath { t0, dt, increments, seed, stream, spec: Some(spec.clone()) })
}

/// Dispatches on the driver kind.
pub fn generate(spec: &DriverSpec, t0: f64, dt: f64, steps: usize, seed: u64, stream: u64) -> Result<DriverPath> {
    match spec {
        DriverSpec::Fractional { .. } => gen_fractional_stream(spec, t0, dt, steps, seed, stream, DEFAULT_EXTENSION_FACTOR),
        _ => gen_levy_stream(spec, t0, dt, steps, seed, stream),
    }
}
