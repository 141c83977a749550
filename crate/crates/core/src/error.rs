use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; rebuild it with a fresh forward pass")]
    BackwardTwice,

    #[error("label {label} at position {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("batch size mismatch: {what} has {left}, {other} has {right}")]
    BatchMismatch {
        what: &'static str,
        left: usize,
        other: &'static str,
        right: usize,
    },

    #[error("unknown architecture variant `{0}`")]
    UnknownArchitecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("IDX: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX: truncated file, expected {expected} bytes but got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("IDX: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("normalization: standard deviation is zero")]
    ZeroStd,

    #[error("empty dataset slice")]
    Empty,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NumericalAbort {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("{0}")]
    Observer(String),

    #[error("t-test needs at least two values per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
}
