use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("frame lies off the decoder image (residual {residual:.3e})")]
    OffImage { residual: f64 },

    #[error("rank-deficient system: numerical rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("integration failed at t = {time}: non-finite state")]
    IntegrationFailed { time: f64 },

    #[error("training diverged at step {step}: loss {loss:.6e}")]
    Diverged { step: usize, loss: f64 },

    #[error("gradient cache is stale: parameters changed after the forward pass")]
    StaleCache,

    #[error("query time {time} outside generator support [0, {support}]")]
    OutsideSupport { time: f64, support: f64 },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}
