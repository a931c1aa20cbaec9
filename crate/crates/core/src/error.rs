use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },

    #[error("batch norm needs at least 2 samples per batch in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("{what}: truncated file (need {need} bytes, have {have})")]
    Truncated { what: &'static str, need: usize, have: usize },

    #[error("idx: dimension product overflows ({0:?})")]
    DimOverflow(Vec<u32>),

    #[error("format: {0}")]
    Format(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for failures caused by the numbers themselves (NaN/Inf).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for failures while reading or decoding data files.
    pub fn is_data(&self) -> bool {
        matches!(self, Error::BadMagic { .. } | Error::Truncated { .. } | Error::DimOverflow(_) | Error::Format(_) | Error::Io(_))
    }
}
