use std::path::PathBuf;

use thiserror::Error;

/// Which half of a perturbed pair produced a loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Plus,
    Minus,
}

impl std::fmt::Display for Pass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pass::Plus => write!(f, "theta + delta*PM"),
            Pass::Minus => write!(f, "theta - delta*PM"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch in {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {value} from forward pass at {pass}")]
    NonFiniteLoss { pass: Pass, value: f64 },

    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteTrainingLoss { epoch: usize, value: f64 },

    #[error("optimizer state became non-finite at step {step}")]
    NonFiniteOptimizerState { step: u64 },

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("reservoir is stateless; capacity measurement needs fading memory")]
    StatelessReservoir,

    #[error("singular readout system (ridge = {ridge}); add regularization")]
    SingularSystem { ridge: f64 },

    #[error("delay {delay} out of range at t = {t}")]
    DelayOutOfRange { t: usize, delay: usize },

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            context,
            expected,
            actual,
        })
    }
}
