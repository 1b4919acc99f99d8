use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
    Env,
    Checkpoint,
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => f.write_str("--set"),
            Origin::Env => f.write_str("LDEQ_SEED"),
            Origin::Checkpoint => f.write_str("checkpoint manifest"),
            Origin::Default => f.write_str("defaults"),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{origin}: key '{key}': {msg}")]
    Config { key: String, origin: Origin, msg: String },

    #[error("{}: format error at offset {offset}: {msg}", .path.display())]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("{}", match .tensor {
        Some(t) => format!("checkpoint tensor '{t}': {}", .msg),
        None => format!("checkpoint: {}", .msg),
    })]
    Checkpoint { tensor: Option<String>, msg: String },

    #[error("training aborted in epoch {epoch}: {divergent} of {steps} steps diverged")]
    Aborted { epoch: usize, divergent: usize, steps: usize },

    #[error(transparent)]
    Core(#[from] ldeq_core::Error),

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub(crate) fn config(key: impl Into<String>, origin: Origin, msg: impl Into<String>) -> Self {
        HarnessError::Config {
            key: key.into(),
            origin,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(tensor: Option<&str>, msg: impl Into<String>) -> Self {
        HarnessError::Checkpoint {
            tensor: tensor.map(str::to_owned),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
