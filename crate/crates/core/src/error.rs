use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmsError {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("singular configuration: condition number {cond:.3e} exceeds {limit:.1e}")]
    SingularConfiguration { cond: f64, limit: f64 },

    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("no feasible scaling vector at step {step}: {report}")]
    InfeasibleStep { step: usize, report: String },

    #[error("controller diverged at t = {t:.3} s: |q_e| = {norm:.3} rad")]
    ControllerDivergence { t: f64, norm: f64 },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SmsError {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        SmsError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmsError::Io {
            path: path.into(),
            source,
        }
    }
}
