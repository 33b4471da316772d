use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected \"DNAD\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated dump: {0}")]
    Truncated(String),

    #[error("dump has {extra} trailing bytes beyond the declared layout")]
    TrailingBytes { extra: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid dump: {0}")]
    InvalidDump(String),

    #[error("labels must contain both classes")]
    SingleClass,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("attention is not present in this dump")]
    AttentionAbsent,

    #[error("no probe for layer {0}")]
    MissingProbe(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
