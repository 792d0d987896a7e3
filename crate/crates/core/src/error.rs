use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(Shape),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error("tensor `{name}` spans bytes {start}..{end} but blob holds {len}")]
    OutOfBounds {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Failure while reading a genotype document; `context` names the line or
/// field that was rejected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenotypeError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{context}: unsupported genotype version {version}")]
    UnsupportedVersion { context: String, version: i64 },
    #[error("{context}: {message}")]
    Invalid { context: String, message: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("scene blob: {0}")]
    Blob(String),
    #[error("dataset index: {0}")]
    Index(String),
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
    #[error("dataset io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Failure while binding unshared-block parameters to shared ones.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TieError {
    #[error("cannot tie `{target}` {target_shape} to `{source_path}` {source_shape}")]
    ShapeMismatch {
        target: String,
        source_path: String,
        target_shape: Shape,
        source_shape: Shape,
    },
    #[error("shared block has no layer for `{0}`")]
    MissingLayer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Top-level error for search, training and verification drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Genotype(#[from] GenotypeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tie(#[from] TieError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure at {stage}: {message}")]
    Numerical { stage: String, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Tensor(TensorError::NonFinite(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
