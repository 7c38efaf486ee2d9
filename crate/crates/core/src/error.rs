use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    /// `q[index] == 0` while `p[index] > 0`.
    #[error("KL divergence undefined: q[{index}] = 0 where p[{index}] > 0")]
    DivergenceUndefined { index: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("variable is not a registered input of this trace")]
    UnknownInput,

    #[error("weight file format error{}: {message}", tensor.as_ref().map(|t| format!(" in tensor '{t}'")).unwrap_or_default())]
    Format {
        tensor: Option<String>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(tensor: Option<&str>, message: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.map(str::to_owned),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numbers themselves (NaN, blow-ups)
    /// rather than from malformed inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Numeric { .. } | Error::DivergenceUndefined { .. }
        )
    }
}
