use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("failed to spawn bridge {cmd}: {source}")]
    Spawn {
        cmd: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bridge {0} did not announce readiness")]
    NotReady(PathBuf),
    #[error("bridge unavailable: {0}")]
    Unavailable(String),
    #[error("bridge rejected a request: {0}")]
    Protocol(String),
    #[error("no bridge command configured for external targets")]
    NotConfigured,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed corpus file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl CampaignError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CampaignError::Io { path: path.into(), source }
    }
}
