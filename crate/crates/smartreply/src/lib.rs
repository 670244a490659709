//! IO, evaluation, benchmarking and serving around `smartreply-core`.

pub mod bench;
pub mod eval;
pub mod io;
pub mod lifecycle;
pub mod persist;
pub mod service;
pub mod workdir;

pub use smartreply_core as core;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] smartreply_core::Error),
    #[error(transparent)]
    Persist(#[from] persist::PersistError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Persist(persist::PersistError::Io { .. }))
    }
}
