use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("unsupported spatial dimension {0}, expected 2 or 3")]
    UnsupportedDimension(usize),

    #[error(
        "identifier pool exhausted: {entities} entities need at least {entities} identifiers, \
         pool has {pool}; an injective assignment exists only if N <= |pool|"
    )]
    PoolExhausted { entities: usize, pool: usize },

    #[error("identifier {id} out of range for embedding table with {rows} rows")]
    IdentifierIndex { id: usize, rows: usize },

    #[error("duplicate identifier {0} in assignment")]
    DuplicateIdentifier(usize),

    #[error("diffusion time {tau} is singular for this operation (sigma or alpha vanishes)")]
    Singular { tau: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("ODE integration produced non-finite values at step {step}")]
    Integration { step: usize },

    #[error("dataset load error in field `{field}`: {detail}")]
    Load { field: String, detail: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the error stems from user input (configs, flags, incompatible artifacts)
    /// rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) | Error::Incompatible(_) | Error::PoolExhausted { .. } => true,
            Error::Context { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
