use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version mismatch: file has v{found}, this build reads v{expected}")]
    CheckpointVersion { expected: u32, found: u32 },
    #[error("config hash mismatch: checkpoint {checkpoint}, current {current}")]
    ConfigHash { checkpoint: String, current: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            expected,
            found,
        })
    }
}
