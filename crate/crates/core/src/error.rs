use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violated for `{param}`: {reason}")]
    Constraint { param: String, reason: String },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("timestep {t} outside 1..={max}")]
    TimestepRange { t: usize, max: usize },

    #[error("timestep ordering: t_prev {t_prev} must be below t {t}")]
    Ordering { t: usize, t_prev: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("condition id {id} outside 0..={null_id}")]
    Condition { id: usize, null_id: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("integrity error in `{entry}`: {reason}")]
    Integrity { entry: String, reason: String },

    #[error("unsupported channel count {0} (PPM export needs 3)")]
    UnsupportedChannels(usize),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("numerical: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn integrity(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            entry: entry.into(),
            reason: reason.into(),
        }
    }
}
