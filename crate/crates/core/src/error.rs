use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input vector")]
    Empty,

    #[error("non-finite value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{name} = {value} is out of range ({allowed})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        allowed: String,
    },

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("reduce op {op} is not defined for {element} buffers")]
    UnsupportedOp {
        op: &'static str,
        element: &'static str,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("zero reference vector, NMSE is undefined")]
    ZeroReference,

    #[error("malformed payload: {0}")]
    Payload(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at round {round}")]
    Diverged { round: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn out_of_range(name: &'static str, value: impl Into<f64>, allowed: impl Into<String>) -> Self {
        Error::OutOfRange {
            name,
            value: value.into(),
            allowed: allowed.into(),
        }
    }
}
