use std::path::PathBuf;

use flexibit_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("pattern length {pattern} does not match trajectory length {trajectory}")]
    LengthMismatch { pattern: usize, trajectory: usize },
    #[error("evidence has zero likelihood under the data-generating process")]
    ZeroLikelihood,
    #[error("no consistent predecessor exists for state {0}")]
    Unreachable(String),
    #[error("batch has no prediction targets")]
    NoTargets,
    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },
    #[error("checkpoint is incompatible with this model: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint is corrupt: {0}")]
    Checkpoint(String),
    #[error("column `{0}` is zero everywhere; cannot normalize")]
    DegenerateColumn(String),
    #[error("unknown task `{0}`; expected one of bc, goal, reward, waypoint, future, past, fwd-dyn, inv-dyn, all, rnd")]
    UnknownTask(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
