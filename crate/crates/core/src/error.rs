use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // binary formats
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("wavelengths not strictly ascending at band {band}")]
    NonAscendingWavelengths { band: usize },
    #[error("wavelength {0} nm outside [370, 1710)")]
    WavelengthOutOfRange(f32),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("malformed file: {0}")]
    Malformed(String),

    // shapes and preconditions
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cube has {0} bands, at least 3 required")]
    TooFewBands(usize),
    #[error("{height}x{width} not divisible by patch {patch}")]
    NotDivisible { height: usize, width: usize, patch: usize },
    #[error("cube {height}x{width} smaller than patch {patch}")]
    TooSmall { height: usize, width: usize, patch: usize },
    #[error("token grid {rows}x{cols} exceeds positional grid {max}")]
    GridOverflow { rows: usize, cols: usize, max: usize },
    #[error("point ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds { row: usize, col: usize, height: usize, width: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),

    // numerics
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite loss {value} ({context})")]
    NonFiniteLoss { value: f64, context: String },
    #[error("gradient requested for frozen parameters")]
    FrozenParameters,

    // pipeline
    #[error("empty mask pool")]
    EmptyPool,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("class count mismatch: {0}")]
    ClassMismatch(String),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("no training objective: pseudo-masks and distillation both disabled")]
    NoObjective,
    #[error("missing teacher features for {0}")]
    MissingFeatures(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
