use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OsdError>;

#[derive(Debug, Error)]
pub enum OsdError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: unsupported sample rate {rate} Hz (expected 16000)")]
    UnsupportedSampleRate { path: PathBuf, rate: u32 },

    #[error("{path}: {channels} channels found and downmix is disabled")]
    MultiChannel { path: PathBuf, channels: u16 },

    #[error("{path}: corrupt or unsupported audio: {reason}")]
    CorruptAudio { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl OsdError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            OsdError::Config(_) | OsdError::InvalidInput(_) => 2,
            OsdError::Divergence(_) => 4,
            OsdError::Io { .. } => 1,
            _ => 3,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        OsdError::Io {
            context: context.into(),
            source,
        }
    }
}
