use thiserror::Error;

use crate::memory::MemoryError;
use crate::sim::CrashPoint;

/// Problems detected while assembling or validating a configuration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown crash site `{0}`")]
    UnknownCrashSite(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{count} data objects exceed the commit bit-map width of {width}")]
    TooManyObjects { count: usize, width: usize },
    #[error("several configuration problems:\n{}", .0.join("\n"))]
    Many(Vec<String>),
}

/// Errors that abort a simulation run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("logic error: {0}")]
    Logic(String),
    #[error("unhandled crash at {0:?}")]
    Crash(CrashPoint),
}
