use std::fmt;
use std::path::Path;

use protoparts::fusion::FusionError;
use protoparts::harness::{EvalError, TrainError};
use protoparts::model::ModelError;

/// Process exit status; the numeric values are a stable contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad flags, config, inputs or an unreadable path.
    User = 2,
    /// The command ran but produced nothing to report.
    Empty = 3,
    /// Non-finite loss, gradient or parameter.
    Numeric = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::User,
            message: message.into(),
        }
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Empty,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::user(format!("{}: {err}", path.display()))
    }

    pub fn code(&self) -> u8 {
        self.kind as u8
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Overflowing weights surface either as non-finite values or as embeddings
/// that collapse to zero; both are numeric failures.
fn numeric(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::NonFinite(_) | ModelError::Fusion(FusionError::DegenerateEmbedding)
    )
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::NonFinite { .. } => ExitKind::Numeric,
            TrainError::Model(m) if numeric(m) => ExitKind::Numeric,
            _ => ExitKind::User,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::EmptyPool => ExitKind::Empty,
            EvalError::Model(m) if numeric(m) => ExitKind::Numeric,
            _ => ExitKind::User,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}
