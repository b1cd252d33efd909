use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("invalid layer state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupted data: {0}")]
    Corruption(String),

    #[error("conversion error: {0}")]
    Conversion(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
