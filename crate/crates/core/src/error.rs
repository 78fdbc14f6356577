use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or argument mismatch supplied by the caller.
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error at layer {layer}: {message}")]
    Numerical { layer: usize, message: String },

    #[error("numerical error at attack step {step}: {message}")]
    AttackStep { step: usize, message: String },

    /// Training loss became non-finite or exceeded the divergence guard.
    #[error("training diverged at step {step} (loss {loss}); last checkpoint: {}", checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        step: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },

    /// A theorem's standing assumption does not hold for this network.
    #[error("validity error: {0}")]
    Validity(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("explicit matrix refused: {elements} input elements exceeds cap {cap}")]
    SizeCap { elements: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Validity(_) | Error::SizeCap { .. } => 2,
            Error::Json(e) if !e.is_io() => 2,
            Error::Numerical { .. } | Error::AttackStep { .. } | Error::Divergence { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Format { .. } => 4,
        }
    }
}
