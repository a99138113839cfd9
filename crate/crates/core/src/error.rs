use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate policy: {0}")]
    DegeneratePolicy(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),

    #[error(
        "enumeration of {requested} sequences exceeds the cap of {cap}; \
         exhaustive enumeration is only supported for small tabular policies"
    )]
    EnumerationCap { requested: u128, cap: u128 },

    #[error("support is not normalized: total mass {total}")]
    UnnormalizedSupport { total: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient data: need {needed} {what}, have {available}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("a pair of trajectories is required for {0}")]
    PairRequired(&'static str),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegeneratePolicy(_) => "degenerate_policy",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::UnknownPrompt(_) => "unknown_prompt",
            Error::EnumerationCap { .. } => "enumeration_cap",
            Error::UnnormalizedSupport { .. } => "unnormalized_support",
            Error::NonFinite(_) => "non_finite",
            Error::Insufficient { .. } => "insufficient_data",
            Error::PairRequired(_) => "pair_required",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
