use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("materialization of {requested} entries exceeds the cap of {cap} entries")]
    SizeCap { requested: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Structural problems found while reading a `KPT1` container.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"KPT1\", found {0:?}")]
    BadMagic(Vec<u8>),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("tensor `{name}` spans bytes {start}..{end} but the payload has {payload} bytes")]
    OutOfBounds {
        name: String,
        start: usize,
        end: usize,
        payload: usize,
    },

    #[error("tensors `{0}` and `{1}` overlap in the payload")]
    Overlap(String, String),

    #[error("payload has {0} trailing bytes not covered by the manifest")]
    TrailingBytes(usize),

    #[error("kronecker group `{group}` factor {factor} is missing its {missing}")]
    Unpaired {
        group: String,
        factor: usize,
        missing: &'static str,
    },

    #[error("tensor `{0}` not found")]
    MissingTensor(String),

    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
}
