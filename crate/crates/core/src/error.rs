/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Config` exits 2, everything else exits 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or layer dimension does not match what an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },
    /// A caller broke a documented precondition (indices out of range,
    /// missing gradients, invalid graph structure, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad experiment configuration (unknown key, out-of-range value).
    #[error("config error: {0}")]
    Config(String),
    /// A binary file failed to decode.
    #[error("malformed file: {0}")]
    Format(String),
    /// Numerical failure at runtime (non-finite state, divergence).
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
