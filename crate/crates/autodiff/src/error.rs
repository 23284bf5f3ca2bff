use thiserror::Error;

pub type Result<T, E = AdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("checkpoint: {msg} (at byte {offset})")]
    Checkpoint { msg: String, offset: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AdError {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        AdError::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AdError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
