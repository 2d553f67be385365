//! File formats, configuration and reproducible runs around
//! `contextnet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pnm;
pub mod profile;
pub mod runs;

use std::path::{Path, PathBuf};

pub use config::RunConfig;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Pnm(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] contextnet_core::Error),
    #[error("{}: {source}", file.display())]
    InFile { file: PathBuf, source: Box<Error> },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn in_file(self, file: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile { file: file.to_path_buf(), source: Box::new(e) },
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Pnm(_) => "format",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Usage(_) => "usage",
            Error::Core(contextnet_core::Error::InvalidConfig(_)) => "config",
            Error::Core(contextnet_core::Error::InvalidLabel { .. }) => "dataset",
            Error::Core(_) => "model",
            Error::InFile { source, .. } => source.kind(),
        }
    }
}
