//! Crate-wide error types.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration key failed validation.
    #[error("config error: key `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    /// Bank too large for the index encoding.
    #[error("unsupported bank size: {0} vectors exceeds the 2-byte index limit of 65536")]
    UnsupportedBankSize(usize),

    /// Adapter byte-stream parsing failed.
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes when decoding an adapter byte stream.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("bad magic: expected \"VBLA\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated stream: needed {needed} bytes for {what}, had {remaining}")]
    Truncated {
        what: &'static str,
        needed: usize,
        remaining: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("corrupt index {index} at sub-vector {subvector}: bank has only {bank_size} rows")]
    CorruptIndex {
        index: u32,
        subvector: usize,
        bank_size: usize,
    },

    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
