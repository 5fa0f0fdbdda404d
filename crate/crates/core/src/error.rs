use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A user-supplied value is out of its valid domain.
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Two adjacent layers cannot be connected.
    #[error("cannot connect layer '{from}' to layer '{to}': {reason}")]
    Construction {
        from: String,
        to: String,
        reason: String,
    },

    /// The instantaneous (delay-0) subgraph contains a cycle.
    #[error("delay-0 cycle through nodes {0:?}")]
    Cycle(Vec<usize>),

    /// The execution plan cannot run on the given graph.
    #[error("plan error: {0}")]
    Plan(String),

    /// A computation produced non-finite values or failed a numerical check.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
