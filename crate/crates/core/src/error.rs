use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("blow-up: non-finite {what} at t = {time}")]
    BlowUp { what: String, time: f64 },

    #[error("unknown problem '{name}'; valid names: {}", valid.join(", "))]
    UnknownProblem { name: String, valid: Vec<String> },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("lattice overflow: coordinate {coordinate} left [{lower}, {upper}] with value {value}")]
    LatticeOverflow {
        coordinate: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl LabError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        LabError::Argument(msg.into())
    }

    /// Errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::BlowUp { .. } | LabError::Solver(_) | LabError::LatticeOverflow { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
