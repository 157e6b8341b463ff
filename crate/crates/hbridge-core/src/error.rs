use thiserror::Error;

/// Error type shared across the crate.
///
/// The CLI maps these onto process exit codes: configuration and input
/// problems are usage errors, `Divergence` signals a numeric failure mid-run,
/// and `Io`/`Format` cover everything touching the filesystem.
#[derive(Error, Debug)]
pub enum HbError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("internal invariant violation: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HbError>;
