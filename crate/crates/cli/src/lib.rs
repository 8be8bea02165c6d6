//! Experiment runner: TOML configs in, per-run CSVs, summaries and SVG plots out.

pub mod config;
pub mod plot;
pub mod runner;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String, Option<std::ops::Range<usize>>),
    #[error("invalid config field `{0}`: {1}")]
    Field(String, String),
    #[error("variant {0}: {1}")]
    Variant(String, mixmask_core::Error),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Csv(PathBuf, csv::Error),
    #[error("{0}: missing column `{1}`")]
    Schema(String, String),
    #[error(transparent)]
    Core(#[from] mixmask_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
