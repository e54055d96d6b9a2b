use thiserror::Error;

/// Errors produced anywhere in the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A state became non-finite during integration or simulation.
    #[error("numeric fault at {0}")]
    NumericFault(FaultLocation),

    /// A gradient, loss or parameter vector contained NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("state not reconstructable: window gives {rows} output rows for {n_x} states (need z*n_y >= n_x)")]
    ObservabilityViolation { rows: usize, n_x: usize },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Where a non-finite state was produced.
///
/// `start` is the subsection start index when the fault happened inside a
/// subsection simulation, `step` the sample interval and `substep` the solver
/// sub-interval within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultLocation {
    pub start: Option<usize>,
    pub step: usize,
    pub substep: usize,
}

impl std::fmt::Display for FaultLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(n) = self.start {
            write!(f, "subsection n={n}, ")?;
        }
        write!(f, "step {}, substep {}", self.step, self.substep)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Re-tag a numeric fault with the subsection start and step offset it occurred in.
    pub(crate) fn at_subsection(self, start: usize, step_offset: usize) -> Self {
        match self {
            Error::NumericFault(loc) => Error::NumericFault(FaultLocation {
                start: Some(start),
                step: loc.step + step_offset,
                substep: loc.substep,
            }),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
