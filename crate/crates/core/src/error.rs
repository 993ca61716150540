use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("kernel matrix is not positive definite after jitter escalation (max jitter {max_jitter:e})")]
    CholeskyFailure { max_jitter: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("singular input covariance in moment matching: {0}")]
    SingularInput(&'static str),

    #[error("covariance not positive semidefinite: smallest eigenvalue {min_eigenvalue:e}")]
    NonPsd { min_eigenvalue: f64 },

    #[error("degenerate samples: all parameter pairs closer than {0:e}")]
    DegenerateSamples(f64),

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("episode {episode} failed: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Rollout { .. } => e,
            e => Error::Rollout {
                step,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn in_episode(self, episode: usize) -> Self {
        Error::Episode {
            episode,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
