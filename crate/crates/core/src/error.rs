use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure categories of the
/// subsystems: tensor shape checks, layer state, aggregation schema checks,
/// protocol state machines, the wire codec and experiment configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch; names both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A layer was driven out of order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Bad training data (e.g. label out of range).
    #[error("data error: {0}")]
    Data(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Wire decode failure with the byte offset where it was detected.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// Resource accounting plan left a layer unassigned or double-assigned.
    #[error("plan error: {0}")]
    Plan(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("timeout: {0}")]
    Timeout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn decode(offset: usize, reason: impl Into<String>) -> Self {
        Error::Decode {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
