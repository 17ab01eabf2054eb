use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("training diverged at epoch {epoch} on bag {bag_id} (loss = {loss})")]
    Divergence {
        epoch: usize,
        bag_id: String,
        loss: f64,
    },

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(location: impl ToString, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.to_string(),
            message: message.into(),
        }
    }
}
