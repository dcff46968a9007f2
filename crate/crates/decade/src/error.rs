//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecadeError {
    /// Bad inputs, shapes, ranges, or schema violations.
    #[error("validation: {0}")]
    Validation(String),
    /// Non-finite values, divergence, failed numerical checks.
    #[error("numerical: {0}")]
    Numerical(String),
    /// Malformed on-disk artifacts (sidecars, raw blobs, checkpoints).
    #[error("format: {0}")]
    Format(String),
    /// Strict config rejection; `path` is the offending key path.
    #[error("config at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DecadeError {
    /// CLI contract: 0 success, 2 validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            DecadeError::Numerical(_) => 3,
            _ => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        DecadeError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        DecadeError::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        DecadeError::Format(msg.into())
    }
}

impl From<csv::Error> for DecadeError {
    fn from(e: csv::Error) -> Self {
        DecadeError::Format(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for DecadeError {
    fn from(e: serde_json::Error) -> Self {
        DecadeError::Format(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, DecadeError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_cli_contract() {
        assert_eq!(DecadeError::validation("x").exit_code(), 2);
        assert_eq!(DecadeError::numerical("x").exit_code(), 3);
        assert_eq!(DecadeError::format("x").exit_code(), 2);
    }
}
