//! Error types shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("cannot balance {split}: not enough {class} records")]
    BalanceUnattainable { split: String, class: String },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("weight archive at {path} is missing or mismatched for layer {layer}")]
    MissingWeight { path: PathBuf, layer: String },
    #[error("non-finite loss at iteration {iteration} (lr {lr}); batch ids: {batch_ids:?}")]
    NonFiniteLoss {
        iteration: u64,
        lr: f64,
        batch_ids: Vec<String>,
    },
    #[error("train error: {0}")]
    Train(String),
    #[error("eval error: {0}")]
    Eval(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Image {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
