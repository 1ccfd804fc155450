use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),

    #[error("context token (C) taped at position {0} before any task was established")]
    ContextWithoutTask(usize),

    #[error("no task established at position {0}")]
    NoActiveTask(usize),

    #[error("position {t} outside history of length {len}")]
    HistoryIndex { t: usize, len: usize },

    #[error("stream of length {len} too short for windows of {n_con} (+1 target)")]
    StreamTooShort { len: usize, n_con: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("malformed {what}: {msg}")]
    Parse { what: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Parse {
            what,
            msg: msg.into(),
        }
    }
}
