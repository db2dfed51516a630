//! TOML run configuration.
//!
//! Matrices are given row-major as flat arrays, one array per coefficient:
//! `a = [A_1, …, A_p]`, `b = [B_0, …, B_{q−1}]`.

use std::path::Path;

use carma_sdde::{CarmaModel, DriverSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Seed used when the config does not set one.
pub const DEFAULT_SEED: u64 = 20_231_106;
pub const DEFAULT_FFT_N: usize = 1 << 16;
pub const DEFAULT_FFT_DT: f64 = 1.0 / 256.0;
pub const DEFAULT_HORIZON: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub task: TaskSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub q: usize,
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSection {
    Brownian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Vec<f64>>,
        vol: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correlation: Option<Vec<f64>>,
    },
    CompoundPoisson {
        rate: Vec<f64>,
        jump_mean: Vec<f64>,
        jump_std: Vec<f64>,
    },
    GammaDifference {
        shape: Vec<f64>,
        scale: Vec<f64>,
    },
    /// Fractional process over a zero-mean Brownian base.
    Fractional {
        beta: Vec<f64>,
        vol: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correlation: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Stem of the output files, e.g. `out/ou` gives `out/ou.path.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zhat_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_amplification: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fft_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fft_dt: Option<f64>,
    /// `simulate`: `statespace` or `ma`; `kernel`: `closed_form` or `fft`;
    /// `predict`: `carma` or `msdde`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

fn config_err(key: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {detail}"))
}

fn matrix(key: &str, n: usize, flat: &[f64]) -> Result<DMatrix<f64>, CliError> {
    if flat.len() != n * n {
        return Err(config_err(key, format!("expected {} entries (row-major {n}x{n}), got {}", n * n, flat.len())));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(config_err(key, "entries must be finite"));
    }
    Ok(DMatrix::from_row_slice(n, n, flat))
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Shape and range checks that need no numerics.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        if m.n == 0 {
            return Err(config_err("model.n", "must be positive"));
        }
        if m.p == 0 {
            return Err(config_err("model.p", "must be positive"));
        }
        if m.q >= m.p {
            return Err(config_err("model.q", format!("must be below p = {}", m.p)));
        }
        if m.a.len() != m.p {
            return Err(config_err("model.a", format!("expected p = {} matrices, got {}", m.p, m.a.len())));
        }
        if m.b.len() != m.q {
            return Err(config_err("model.b", format!("expected q = {} matrices, got {}", m.q, m.b.len())));
        }
        for (i, a) in m.a.iter().enumerate() {
            matrix(&format!("model.a[{i}]"), m.n, a)?;
        }
        for (i, b) in m.b.iter().enumerate() {
            matrix(&format!("model.b[{i}]"), m.n, b)?;
        }
        if let Some(d) = &self.driver {
            let spec = d.to_spec(m.n)?;
            spec.validate().map_err(|e| config_err("driver", e))?;
        }
        if let Some(g) = &self.grid {
            positive("grid.dt", g.dt)?;
            if g.steps == 0 {
                return Err(config_err("grid.steps", "must be positive"));
            }
            if !g.t0.is_finite() {
                return Err(config_err("grid.t0", "must be finite"));
            }
            if let Some(b) = g.burn_in {
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(config_err("grid.burn_in", "must be non-negative"));
                }
            }
        }
        let t = &self.task;
        for (key, v) in [
            ("task.tol", t.tol),
            ("task.max_amplification", t.max_amplification),
            ("task.horizon", t.horizon),
            ("task.horizon_step", t.horizon_step),
            ("task.fft_dt", t.fft_dt),
        ] {
            if let Some(v) = v {
                positive(key, v)?;
            }
        }
        if let Some(n) = t.fft_n {
            if n < 16 || !n.is_power_of_two() {
                return Err(config_err("task.fft_n", "must be a power of two of at least 16"));
            }
        }
        if let Some(method) = &t.method {
            const KNOWN: [&str; 6] = ["statespace", "ma", "closed_form", "fft", "carma", "msdde"];
            if !KNOWN.contains(&method.as_str()) {
                return Err(config_err("task.method", format!("unknown method {method:?}, expected one of {KNOWN:?}")));
            }
        }
        Ok(())
    }

    pub fn a_matrices(&self) -> Vec<DMatrix<f64>> {
        self.model.a.iter().map(|a| DMatrix::from_row_slice(self.model.n, self.model.n, a)).collect()
    }

    pub fn b_matrices(&self) -> Vec<DMatrix<f64>> {
        self.model.b.iter().map(|b| DMatrix::from_row_slice(self.model.n, self.model.n, b)).collect()
    }

    pub fn model(&self) -> carma_sdde::Result<CarmaModel> {
        CarmaModel::new(self.model.n, self.a_matrices(), self.b_matrices())
    }

    pub fn driver_spec(&self) -> Result<DriverSpec, CliError> {
        self.driver.as_ref().ok_or_else(|| config_err("driver", "section is required for this command"))?.to_spec(self.model.n)
    }

    pub fn grid(&self) -> Result<&GridSection, CliError> {
        self.grid.as_ref().ok_or_else(|| config_err("grid", "section is required for this command"))
    }

    pub fn seed(&self) -> u64 {
        self.task.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn tol(&self) -> f64 {
        self.task.tol.unwrap_or(carma_sdde::engine::DEFAULT_TOL)
    }

    pub fn max_amplification(&self) -> f64 {
        self.task.max_amplification.unwrap_or(carma_sdde::engine::DEFAULT_MAX_AMPLIFICATION)
    }

    /// TOML of the configuration, for embedding in output headers.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl DriverSection {
    pub fn to_spec(&self, n: usize) -> Result<DriverSpec, CliError> {
        let corr = |c: &Option<Vec<f64>>| c.as_ref().map(|c| matrix("driver.correlation", n, c)).transpose();
        let check_len = |key: &str, v: &[f64]| {
            if v.len() == n {
                Ok(())
            } else {
                Err(config_err(key, format!("expected {n} entries, got {}", v.len())))
            }
        };
        let spec = match self {
            DriverSection::Brownian { drift, vol, correlation } => {
                check_len("driver.vol", vol)?;
                let drift = drift.clone().unwrap_or_else(|| vec![0.0; n]);
                check_len("driver.drift", &drift)?;
                DriverSpec::Brownian { drift, vol: vol.clone(), correlation: corr(correlation)? }
            }
            DriverSection::CompoundPoisson { rate, jump_mean, jump_std } => {
                check_len("driver.rate", rate)?;
                check_len("driver.jump_mean", jump_mean)?;
                check_len("driver.jump_std", jump_std)?;
                DriverSpec::CompoundPoisson { rate: rate.clone(), jump_mean: jump_mean.clone(), jump_std: jump_std.clone() }
            }
            DriverSection::GammaDifference { shape, scale } => {
                check_len("driver.shape", shape)?;
                check_len("driver.scale", scale)?;
                DriverSpec::GammaDifference { shape: shape.clone(), scale: scale.clone() }
            }
            DriverSection::Fractional { beta, vol, correlation } => {
                check_len("driver.beta", beta)?;
                check_len("driver.vol", vol)?;
                let base = DriverSpec::Brownian { drift: vec![0.0; n], vol: vol.clone(), correlation: corr(correlation)? };
                DriverSpec::Fractional { base: Box::new(base), beta: beta.clone() }
            }
        };
        Ok(spec)
    }
}
