//! Probabilistic Siamese encoder, transformation decoder and training loss.

mod loss;
mod net;

pub use loss::{
    avt_loss, gaussian_nll, gaussian_nll_value, mi_lower_bound_estimate, reparameterize, sample_step_inputs,
    surrogate_entropy,
    LossDiagnostics, LossOutput, StepInputs, LOG_2PI,
};
pub use net::{Architecture, Encoded, Model, Param, ParamKind, LOGVAR_MAX, LOGVAR_MIN};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::transforms::TransformError;

/// Training objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic representations and a learned decoder variance.
    Avt,
    /// Deterministic representations, unit decoder variance (squared error).
    Aet,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Avt => "avt",
            Mode::Aet => "aet",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avt" => Ok(Mode::Avt),
            "aet" => Ok(Mode::Aet),
            other => Err(ModelError::Config(format!("unknown mode `{other}` (expected avt or aet)"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}
