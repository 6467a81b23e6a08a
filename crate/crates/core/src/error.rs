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
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("non-binary label {value:?} for sample {sample:?}, column {column:?}")]
    NonBinaryLabel {
        sample: String,
        column: String,
        value: String,
    },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("crop size {size} exceeds image {height}x{width}")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("unweightable empty class {0:?}")]
    EmptyClass(String),
    #[error("single-class labels: {0}")]
    SingleClass(String),
    #[error("sample {sample:?} missing from predictions of {model:?}")]
    MissingSample { model: String, sample: String },
    #[error("duplicate model id {0:?}")]
    DuplicateModel(String),
    #[error("member mismatch: {0}")]
    MemberMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input, configuration or file contents.
    Validation,
    /// Non-finite values or solver breakdown.
    Numerical,
    /// Data that is well-formed but cannot support the requested fit.
    Degenerate,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Degenerate(_) | Error::EmptyClass(_) => ErrorKind::Degenerate,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
