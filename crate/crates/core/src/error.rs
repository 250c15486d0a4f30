use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("singular input: {0}")]
    Singular(String),

    #[error("simulation failed at t={t}: {msg} (state={state:?})")]
    Simulation { t: f64, state: Vec<f64>, msg: String },

    #[error("trajectory {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown descriptor `{given}`; valid forms: {valid}")]
    Descriptor { given: String, valid: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Dimension { .. }
            | Error::Precondition(_)
            | Error::Config(_)
            | Error::Descriptor { .. }
            | Error::Parse { .. }
            | Error::Format(_) => true,
            Error::Batch { source, .. } => source.is_validation(),
            Error::Singular(_) | Error::Simulation { .. } | Error::Degenerate(_) | Error::Io(_) => {
                false
            }
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
