use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("sampling produced a non-finite state at step {step}")]
    SamplerDiverged { step: usize },
    #[error("non-finite loss {loss} on batch {batch}")]
    NonFiniteLoss { loss: f64, batch: String },
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),
    #[error("infeasible balance: {0}")]
    InfeasibleBalance(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
