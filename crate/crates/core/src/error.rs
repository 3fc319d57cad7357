use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid agent state: {0}")]
    InvalidState(String),

    #[error("history discontinuity: expected time {expected}, got {got}")]
    HistoryDiscontinuity { expected: f64, got: f64 },

    #[error("agent {agent} is {distance:.2} m from its route, beyond the recovery radius")]
    OffMap { agent: u32, distance: f64 },

    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("records out of order: time {got} after {previous}")]
    Ordering { previous: f64, got: f64 },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("unresolved reference: {kind} '{name}'")]
    Resolution { kind: &'static str, name: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by malformed user input (scenario, config, logs).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Version { .. }
                | Error::Resolution { .. }
                | Error::Parse(_)
                | Error::InvalidInput(_)
                | Error::Checkpoint(_)
                | Error::Ordering { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
