//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// The variants are grouped by how a caller is expected to react: bad input
/// (`Dimension`, `InvalidParameter`, `Precondition`), a model that violates a
/// standing hypothesis (`Hypothesis`), data that is too short for the requested
/// computation (`InsufficientHistory`), or a genuine numerical breakdown
/// (`Numerical`).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{module}: dimension mismatch: {detail}")]
    Dimension { module: &'static str, detail: String },

    #[error("{module}: invalid parameter: {detail}")]
    InvalidParameter { module: &'static str, detail: String },

    #[error("{module}: precondition violated: {detail}")]
    Precondition { module: &'static str, detail: String },

    #[error("{module}: hypothesis violated: {detail}")]
    Hypothesis { module: &'static str, detail: String },

    #[error("{module}: insufficient history: {detail}")]
    InsufficientHistory { module: &'static str, detail: String },

    #[error("{module}: numerical failure: {detail}")]
    Numerical { module: &'static str, detail: String },
}

impl Error {
    pub(crate) fn dimension(module: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { module, detail: detail.into() }
    }

    pub(crate) fn invalid(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter { module, detail: detail.into() }
    }

    pub(crate) fn precondition(module: &'static str, detail: impl Into<String>) -> Self {
        Error::Precondition { module, detail: detail.into() }
    }

    pub(crate) fn hypothesis(module: &'static str, detail: impl Into<String>) -> Self {
        Error::Hypothesis { module, detail: detail.into() }
    }

    pub(crate) fn history(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InsufficientHistory { module, detail: detail.into() }
    }

    pub(crate) fn numerical(module: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical { module, detail: detail.into() }
    }

    /// Name of the module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dimension { module, .. }
            | Error::InvalidParameter { module, .. }
            | Error::Precondition { module, .. }
            | Error::Hypothesis { module, .. }
            | Error::InsufficientHistory { module, .. }
            | Error::Numerical { module, .. } => module,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
