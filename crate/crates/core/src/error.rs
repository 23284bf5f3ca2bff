use panogen_autodiff::AdError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{format}: {msg} (at byte {offset})")]
    Codec {
        format: &'static str,
        msg: String,
        offset: u64,
    },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("embedding store: {msg} (record {record}, byte {offset})")]
    Store {
        msg: String,
        record: usize,
        offset: u64,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    /// A stage was asked to run before the stage it depends on.
    #[error("missing {stage}: {msg}")]
    Missing { stage: String, msg: String },
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn codec(format: &'static str, msg: impl Into<String>, offset: usize) -> Self {
        Error::Codec {
            format,
            msg: msg.into(),
            offset: offset as u64,
        }
    }
}
