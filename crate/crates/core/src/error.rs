use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScsmError>;

#[derive(Debug, Error)]
pub enum ScsmError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("policy violation: {0}")]
    PolicyViolation(String),

    #[error("data contamination: {0}")]
    Contamination(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScsmError {
    pub fn dim(op: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        ScsmError::Dimension {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        ScsmError::Argument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ScsmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-parsable class name, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            ScsmError::Dimension { .. } => "dimension",
            ScsmError::Argument(_) => "argument",
            ScsmError::NonFinite(_) => "non_finite",
            ScsmError::PolicyViolation(_) => "policy_violation",
            ScsmError::Contamination(_) => "contamination",
            ScsmError::Format(_) => "format",
            ScsmError::Io { .. } => "io",
        }
    }
}
