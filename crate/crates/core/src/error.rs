use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("dimension error at layer {layer}: {message}")]
    LayerDimension { layer: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("value {0} is not a plateau of the step-wise activation")]
    NotAPlateau(f64),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("handshake rejected: mismatching field `{0}`")]
    HandshakeRejected(String),

    #[error("sink failure after batch seq {resume_seq:?}: {source}")]
    SinkFailed {
        /// Sequence number to resume from (the first batch not delivered).
        resume_seq: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
