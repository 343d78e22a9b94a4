use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("hyperparameter layout mismatch: {0}")]
    Layout(String),

    #[error("materialization gate exceeded: {rows}x{cols} > {limit} entries")]
    Gate {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("tape replay diverged at step {step}")]
    Replay { step: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed data in {path}: {reason}")]
    Data { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("hyper-iteration {iteration}: {source}")]
    AtIteration { iteration: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    /// True for errors caused by the numbers themselves rather than by bad inputs.
    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::NonFinite { .. })
    }

    /// The underlying error with iteration context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}
