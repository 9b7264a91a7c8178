use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("failed to parse config: {0}")]
    Parse(String),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("runs are not comparable: {0}")]
    Incomparable(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SimError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (config, flags, presets),
    /// as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SimError::Parse(_) | SimError::Invalid { .. } | SimError::UnknownPreset(_)
        )
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
