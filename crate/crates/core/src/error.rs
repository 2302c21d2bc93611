use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension product overflows: {0}")]
    DimensionOverflow(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("empty stamp")]
    EmptyStamp,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("crop size {size} exceeds stamp dimensions {height}x{width}")]
    CropTooLarge { size: usize, height: usize, width: usize },

    #[error("rotation requires a square stamp, got {height}x{width}")]
    NonSquare { height: usize, width: usize },

    #[error("shift of {shift} pixels is not smaller than stamp dimension {dim}")]
    ShiftTooLarge { shift: usize, dim: usize },

    #[error("channel {height}x{width} is smaller than the {kernel}x{kernel} kernel")]
    ChannelTooSmall { height: usize, width: usize, kernel: usize },

    #[error("unknown catalog {name:?}; valid catalogs: {valid}")]
    UnknownCatalog { name: String, valid: String },

    #[error("catalog file line {line}: {message}")]
    CatalogParse { line: usize, message: String },

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("non-finite value in input: {0}")]
    NonFinite(String),

    #[error("dirichlet fit did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("zero variance in both samples")]
    ZeroVariance,

    #[error("discrimination matrix incomplete: pair ({i}, {j}) has no accuracy")]
    IncompleteMatrix { i: usize, j: usize },
}
