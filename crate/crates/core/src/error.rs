use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("state error: {0}")]
    State(String),
    #[error("index {index} out of bounds for extent {bound} in {op}")]
    Bounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid boundaries: {0}")]
    Boundary(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("metric undefined: {0}")]
    InvalidMetric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
