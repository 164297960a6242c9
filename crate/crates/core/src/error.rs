use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot pair {reference} with {secondary}: {reason}")]
    Pairing {
        reference: String,
        secondary: String,
        reason: String,
    },

    #[error("no reference acquisition within ±{window_days} days of {target} on path {orbit_path}")]
    NoReference {
        target: chrono::NaiveDate,
        window_days: i64,
        orbit_path: u32,
    },

    #[error("insufficient stack: {available} usable members, at least {required} required ({context})")]
    InsufficientStack {
        available: usize,
        required: usize,
        context: String,
    },

    #[error("grid alignment mismatch: {0}")]
    Alignment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tiff codec error in {path}: {message}")]
    Tiff { path: PathBuf, message: String },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("time series out of order: {0}")]
    Ordering(String),

    #[error("rate undefined: no new damage in reference window {0}")]
    UndefinedRate(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("cannot build an agreement report from an empty point set")]
    EmptyReport,

    #[error("histogram binning mismatch: {0}")]
    Binning(String),

    #[error("region mask selects no valid pixels")]
    EmptyRegion,

    #[error("unknown synthetic acquisition {0}")]
    Catalog(String),

    #[error("credentials rejected by processing service: {0}")]
    Credential(String),

    #[error("every pair in the plan failed to process ({0} pairs)")]
    EmptyStack(usize),

    #[error("checksum mismatch for {pair}: expected {expected}, got {actual}")]
    Integrity {
        pair: String,
        expected: String,
        actual: String,
    },

    #[error("processing service error: {0}")]
    Service(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Pairing { .. } => "pairing",
            Error::NoReference { .. } => "no_reference",
            Error::InsufficientStack { .. } => "insufficient_stack",
            Error::Alignment(_) => "alignment",
            Error::Io { .. } => "io",
            Error::Tiff { .. } => "tiff",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Ordering(_) => "ordering",
            Error::UndefinedRate(_) => "undefined_rate",
            Error::Accounting(_) => "accounting",
            Error::EmptyReport => "empty_report",
            Error::Binning(_) => "binning",
            Error::EmptyRegion => "empty_region",
            Error::Catalog(_) => "catalog",
            Error::Credential(_) => "credential",
            Error::EmptyStack(_) => "empty_stack",
            Error::Integrity { .. } => "integrity",
            Error::Service(_) => "service",
        }
    }
}
