use thiserror::Error;

/// Errors raised across the crate. Messages are prefixed with the module
/// that produced them so CLI output stays attributable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numerics: dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("numerics: non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{module}: invalid argument: {message}")]
    InvalidArgument {
        module: &'static str,
        message: String,
    },

    #[error("regularizers: weight decay overshoot, 1 - lr * decay = {factor} < 0")]
    DecayOvershoot { factor: f64 },

    #[error("trainer: training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("{context}: parse error: {message}")]
    Parse {
        context: &'static str,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn parse(context: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
