//! Unified error taxonomy shared by every layer of the framework.

use std::fmt;

/// Framework-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure categories raised by the framework.
///
/// Each variant carries a human-readable message naming the operator,
/// the offending argument and the violated constraint where applicable.
/// Errors are `Clone` so a failed asynchronous operation can report the
/// same error to every thread awaiting its completion event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor/buffer extents incompatible with the requested operation.
    Shape(String),
    /// A scalar argument violates its constraint (negative stride, bad range...).
    Argument(String),
    /// Malformed label data (a one-hot row without exactly one hot entry).
    Label(String),
    /// Use of a freed or unknown buffer/tensor handle.
    InvalidHandle(String),
    /// A pool contract violation (double release, foreign buffer...).
    PoolIntegrity(String),
    /// The host refused an allocation request.
    AllocationFailure(String),
    /// Computational-graph misuse (mutation between forward and backward,
    /// stale tensors from a recycled pass, backward without forward).
    Graph(String),
    /// Malformed external data (checkpoint container, dataset file).
    Format(String),
    /// An object was driven through an illegal state transition.
    State(String),
    /// Iterator protocol violation (next on an exhausted iterator).
    Iteration(String),
    /// Invalid harness configuration.
    Config(String),
}

impl Error {
    /// Short category tag, used as the message prefix (and CLI exit text).
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Label(_) => "label",
            Error::InvalidHandle(_) => "invalid-handle",
            Error::PoolIntegrity(_) => "pool-integrity",
            Error::AllocationFailure(_) => "allocation-failure",
            Error::Graph(_) => "graph",
            Error::Format(_) => "format",
            Error::State(_) => "state",
            Error::Iteration(_) => "iteration",
            Error::Config(_) => "config",
        }
    }

    fn message(&self) -> &str {
        match self {
            Error::Shape(m)
            | Error::Argument(m)
            | Error::Label(m)
            | Error::InvalidHandle(m)
            | Error::PoolIntegrity(m)
            | Error::AllocationFailure(m)
            | Error::Graph(m)
            | Error::Format(m)
            | Error::State(m)
            | Error::Iteration(m)
            | Error::Config(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category(), self.message())
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Format(e.to_string())
    }
}
