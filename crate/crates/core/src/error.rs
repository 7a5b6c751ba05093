use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient negatives: need {needed} items outside the user's {interacted} interactions, vocabulary has {available}")]
    InsufficientNegatives { needed: usize, interacted: usize, available: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: L_rec={rec}, L_ali={ali}, L_con={con}")]
    NonFiniteLoss { epoch: usize, batch: usize, rec: f64, ali: f64, con: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { op, expected: expected.to_string(), got: got.to_string() }
    }
}
