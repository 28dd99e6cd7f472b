use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A `(unit, period)` cell identified by its original labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub unit: String,
    pub period: String,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.unit, self.period)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unbalanced panel: {} missing cell(s), first {}", missing.len(), missing.first().map(|c| c.to_string()).unwrap_or_default())]
    Balance { missing: Vec<Cell> },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate record for cell {0}")]
    Duplicate(Cell),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient history for {what}: needs period {required} but the first observed period is 1")]
    Lag { what: String, required: i64 },

    #[error("fold {0} cannot be demeaned against itself")]
    SelfDemean(usize),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("solver did not converge ({context}): kkt violation {kkt_violation:e} after {iterations} sweeps")]
    NotConverged {
        context: String,
        kkt_violation: f64,
        iterations: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Attach context to solver and numeric failures; other variants pass through.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::NotConverged {
                context,
                kkt_violation,
                iterations,
            } => Error::NotConverged {
                context: format!("{}: {context}", ctx.as_ref()),
                kkt_violation,
                iterations,
            },
            Error::Numeric(m) => Error::Numeric(format!("{}: {m}", ctx.as_ref())),
            other => other,
        }
    }
}
