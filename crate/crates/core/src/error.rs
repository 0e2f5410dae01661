use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("footprint out of bounds: {0}")]
    OutOfBounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged: loss became {0}")]
    Diverged(f64),

    #[error("budget violated: cost so far {spent:.6} s exceeds budget {budget:.6} s")]
    BudgetViolated { spent: f64, budget: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
