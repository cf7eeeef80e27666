use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor kernels, models, datasets and IO paths.
#[derive(Debug)]
pub enum Error {
    /// Incompatible operand shapes; names the operation and the offending extents.
    Shape { op: &'static str, detail: String },
    /// A configuration or argument value that cannot be honored.
    InvalidArg(String),
    /// A NaN or infinity was produced where finite values are required.
    NonFinite { context: String },
    /// Dataset or manifest level problem (missing file, bad label, empty split).
    Data(String),
    /// Backward called on a tape that was cleared or with a foreign variable.
    TapeConsumed,
    /// Backward called on a non-scalar loss.
    LossNotScalar { shape: Vec<usize> },
    /// Wrapped IO failure, always carrying the path involved.
    Io { path: String, source: std::io::Error },
    /// Malformed file contents (checkpoint, image, manifest, config).
    Parse { what: String, detail: String },
    /// Refusal to clobber an existing output artifact.
    OutputExists { path: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::TapeConsumed => write!(f, "tape already consumed or variable out of range"),
            Error::LossNotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Parse { what, detail } => write!(f, "failed to parse {what}: {detail}"),
            Error::OutputExists { path } => {
                write!(f, "output file already exists: {path}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) | Error::Shape { .. } => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
