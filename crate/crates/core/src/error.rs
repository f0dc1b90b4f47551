use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("variable x{index} at byte {offset} is outside dimension {dim}")]
    VariableOutOfRange {
        index: usize,
        dim: usize,
        offset: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation produced a non-finite value")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("vector fields do not span at {point:?}")]
    NotSpanning { point: Vec<f64> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("trajectory left the domain at time {time} (state {state:?})")]
    ExitedDomain { time: f64, state: Vec<f64> },

    #[error("trajectory blew up at time {time}")]
    BlowUp { time: f64 },

    #[error("Picard iteration failed to contract: {0}")]
    Contraction(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("point {point:?} is outside the sampled grid")]
    OutsideGrid { point: Vec<f64> },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("chart construction failed: {0}")]
    Chart(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { expected, found })
    }
}
