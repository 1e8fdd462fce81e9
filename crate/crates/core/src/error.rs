use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    AllMaskedRow { row: usize },

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("index {index} out of range (len {len}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("unknown symbol `{symbol}`")]
    UnknownSymbol { symbol: String },

    #[error("corrupt record for utterance `{utt_id}`: {reason}")]
    CorruptRecord { utt_id: String, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
