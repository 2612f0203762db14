use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("duplicate record for site={site} year={year} station={station} species={species}")]
    DuplicateRecord {
        site: String,
        year: i32,
        station: String,
        species: String,
    },
    #[error("invalid indicator list: {0}")]
    Indicators(String),
    #[error("no usable deployments")]
    EmptyTable,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("year {0} is not in the fitted year index")]
    UnknownYear(i32),
    #[error("site `{0}` is not in the fitted site index")]
    UnknownSite(String),
    #[error("site `{site}` has no observation in year {year}; it cannot be compared to the baseline")]
    ExcludedScope { site: String, year: i32 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("target density failed: {0}")]
    Target(String),
    #[error("need at least {needed} draws, got {got}")]
    TooFewDraws { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
