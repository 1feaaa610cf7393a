use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A non-finite number showed up. `level` is 1-based when known.
    #[error("non-finite value at level {level:?}: {context}")]
    Numeric { level: Option<usize>, context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("reference run did not converge: gradient norm {grad_norm:e} after {iters} iterations")]
    OracleNotConverged { grad_norm: f64, iters: usize },

    #[error("run diverged at iteration {iteration}: {source}")]
    Run {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(level: Option<usize>, context: impl Into<String>) -> Self {
        Error::Numeric {
            level,
            context: context.into(),
        }
    }

    pub fn annotate(self, context: impl Into<String>) -> Self {
        Error::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
