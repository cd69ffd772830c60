//! Error and result types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the pricing and estimation pipeline.
///
/// Variants split into two families, mirrored by [`Error::exit_code`]:
/// problems with the caller's input (dimensions, ranges, malformed files) and
/// numerical failures encountered while computing (singular systems,
/// infeasible grids, values leaving their mathematical domain).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent caller input: bad dimensions, out-of-range
    /// parameters, unknown identifiers.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A linear system could not be solved because the named matrix is
    /// singular or not positive definite.
    #[error("singular system: {matrix} matrix {reason}")]
    SingularSystem {
        /// Which matrix failed to factor (e.g. "covariance", "design").
        matrix: &'static str,
        /// What went wrong.
        reason: String,
    },

    /// Fewer observations than parameters, or an identification bound
    /// (such as the per-grade requirement of at least 2·J·q bonds) violated.
    #[error("under-identified model: {0}")]
    UnderIdentified(String),

    /// Every point of a parameter grid failed to evaluate.
    #[error("no feasible grid point: {0}")]
    NoFeasiblePoint(String),

    /// A quantity left its mathematical domain (non-positive discount factor,
    /// yield at zero tenor, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The premium leg of a swap has no value, so no finite fair premium
    /// exists.
    #[error("no fair premium: {0}")]
    NoFairPremium(String),

    /// Structurally invalid market data (duplicate identifiers, weights that
    /// do not sum to one, references to undeclared industries or grades).
    #[error("validation error: {0}")]
    Validation(String),

    /// Synthetic data generation failed, e.g. the requested noise covariance
    /// is not positive definite or the implied discount curve goes negative.
    #[error("generation error: {0}")]
    Generation(String),

    /// A record in an input file could not be parsed.
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        /// File the record came from.
        path: String,
        /// 1-based line number.
        line: usize,
        /// What failed to parse.
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line interface: 1 for input and
    /// validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::UnderIdentified(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 1,
            Error::SingularSystem { .. }
            | Error::NoFeasiblePoint(_)
            | Error::Domain(_)
            | Error::NoFairPremium(_)
            | Error::Generation(_) => 2,
        }
    }
}
