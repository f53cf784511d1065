use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("non-finite gradient component at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for buffer holding {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ordering `{0}` requires instance/frame metadata, which the dataset does not carry")]
    MissingInstanceMetadata(&'static str),

    #[error("offline reference accuracy is zero at testing event {event}")]
    ZeroReference { event: usize },

    #[error("testing event {event} has no test records for the classes observed so far")]
    EmptyTestSet { event: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Problems found while decoding an embedding dataset file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: Vec<u8> },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("header field `{field}` at byte {offset} must be positive")]
    ZeroField { field: &'static str, offset: usize },

    #[error("header field `{field}` at byte {offset} is {value}, above the format limit {limit}")]
    FieldTooLarge {
        field: &'static str,
        offset: usize,
        value: u64,
        limit: u64,
    },

    #[error("record {record} (byte {offset}): label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        record: usize,
        offset: u64,
        label: u32,
        classes: u32,
    },

    #[error("record {record} (byte {offset}): non-finite embedding value")]
    NonFiniteEmbedding { record: usize, offset: u64 },

    #[error("record {record} (byte {offset}): frame {frame} repeated for class {label}, instance {instance}")]
    DuplicateFrame {
        record: usize,
        offset: u64,
        label: u32,
        instance: u32,
        frame: u32,
    },

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
}
