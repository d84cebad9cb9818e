use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("reshape: {from:?} has {from_len} elements, {to:?} needs {to_len}")]
    ExtentMismatch {
        from: Vec<usize>,
        to: Vec<usize>,
        from_len: usize,
        to_len: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidShape(String),

    #[error("channel count {channels} is not divisible by class count {classes}")]
    Indivisible { channels: usize, classes: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("at least two classes are needed, got {0}")]
    TooFewClasses(usize),

    #[error("batch norm in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic number in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("{0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint preset mismatch: {0}")]
    PresetMismatch(String),

    #[error("unsupported checkpoint version: {0}")]
    VersionMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_block(self, index: usize) -> Self {
        match self {
            e @ Error::Block { .. } => e,
            e => Error::Block {
                index,
                source: Box::new(e),
            },
        }
    }
}
