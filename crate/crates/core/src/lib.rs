//! Multivariate CARMA processes as stochastic delay differential equations.
//!
//! The crate covers matrix polynomial algebra, stability checks, delay
//! measures and their solution kernels, closed-form CARMA kernels, Lévy and
//! fractional drivers, and the simulation, noise recovery and prediction
//! engine built on top of them.

pub mod conv;
pub mod drivers;
pub mod engine;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod matpoly;
pub mod msdde;
pub mod stability;

pub use drivers::{DriverPath, DriverSpec};
pub use engine::{Horizon, NoiseMean, PredictOptions, PredictionResult, RecoverOptions, RecoveredNoise, SampledPath};
pub use error::{Error, Result};
pub use kernels::CarmaModel;
pub use matpoly::MatrixPoly;
pub use msdde::{DelayMeasure, Density, HigherOrderSdde, SampledKernel};
