use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("vocabulary exhausted: dataset needs {required} entity ids but only {available} are available")]
    VocabExhausted { required: usize, available: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("circuit: {0}")]
    Circuit(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr}): loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape(format!("{op}: incompatible shapes {lhs:?} and {rhs:?}"))
    }
}
