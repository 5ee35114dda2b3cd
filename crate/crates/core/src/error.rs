use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("split too short: {len} tokens, need at least {need} for batch={batch}, bptt={bptt}")]
    SplitTooShort {
        len: usize,
        need: usize,
        batch: usize,
        bptt: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("hash mismatch: {0}")]
    HashMismatch(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("datastore is empty")]
    EmptyStore,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
