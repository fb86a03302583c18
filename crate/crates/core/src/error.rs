//! Error types shared across the crate.
//!
//! Every fallible operation returns [`Error`]; the CLI maps each variant
//! family to a stable process exit code via [`Error::exit_code`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {context}")]
    Numeric { context: String },

    /// A class label fell outside `0..classes`.
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// Bad run configuration: unknown variant names, invalid hyperparameters,
    /// missing required inputs, refusing to overwrite without `--force`.
    #[error("config error: {0}")]
    Config(String),

    /// A file on disk does not match the format it claims to be.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Scene rejection sampling ran out of attempts for one seed.
    #[error("could not place a valid scene for seed {seed} after {attempts} attempts")]
    Generation { seed: u64, attempts: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error: 2 for configuration problems, 3 for
    /// data and file format problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dim { .. } | Error::Generation { .. } => 2,
            Error::Format { .. } | Error::Io(_) | Error::Label { .. } => 3,
            Error::Numeric { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
