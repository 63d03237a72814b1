//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. The CLI maps variants onto
//! process exit codes via [`Error::exit_code`]: configuration, shape, and
//! file validation problems exit with 2, I/O problems with 3, and numerical
//! failures (domain violations at runtime, degenerate geometry,
//! ill-conditioned gradients, non-finite values) with 4.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument was outside its documented domain (negative depth,
    /// non-positive temperature, offset outside `[0, 1]`, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two containers that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A categorical distribution summed to zero, so nothing can be drawn.
    #[error("empty distribution: total probability mass is zero")]
    EmptyDistribution,

    /// A sample without replacement asked for more items than have
    /// non-negligible probability.
    #[error("insufficient support: need {needed} sampleable entries, have {available}")]
    Support { needed: usize, available: usize },

    /// Fewer data points than the operation can work with.
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Point configuration admits no unique rigid alignment
    /// (coincident or collinear points).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// The alignment gradient is unreliable because singular values of the
    /// cross-covariance nearly coincide.
    #[error("ill-conditioned gradient: relative singular value gap {gap:.3e} is below {min_gap:.3e}")]
    IllConditionedGradient { gap: f64, min_gap: f64 },

    /// Every hypothesis slot failed (degenerate minimal sets, resample
    /// budget exhausted).
    #[error("no hypothesis could be generated")]
    NoHypothesis,

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Synthetic scene generation exhausted its retry budget.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// A data file had the wrong schema or a malformed record.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::InsufficientData { .. }
            | Error::Validation(_)
            | Error::Parse { .. } => 2,
            Error::Io(_) => 3,
            Error::Domain(_)
            | Error::EmptyDistribution
            | Error::Support { .. }
            | Error::DegenerateConfiguration(_)
            | Error::IllConditionedGradient { .. }
            | Error::NoHypothesis
            | Error::NonFinite(_)
            | Error::Generation(_) => 4,
        }
    }
}
