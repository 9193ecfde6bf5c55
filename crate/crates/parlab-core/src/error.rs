//! Crate-wide error type.

/// Errors surfaced by solvers, audits and experiment drivers.
///
/// Diagnostics carry `f64` payloads regardless of the scalar the computation
/// ran in; they are for reporting, not for further arithmetic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid experiment description (grid resolution, window layout,
    /// parameter domains). Maps to the validation exit code in the CLI.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two objects built over different grids were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A mask of the wrong kind (interior vs boundary) or an empty mask was
    /// supplied.
    #[error("mask error: {0}")]
    Mask(String),

    /// Input outside the documented domain of a function (nonpositive level,
    /// empty window, zero field where a normalization is required).
    #[error("domain error: {0}")]
    Domain(String),

    /// Source or boundary input carries values outside its declared
    /// space-time support.
    #[error("support violation: {0}")]
    Support(String),

    /// A linear system was singular or near-singular where the experiment
    /// requires solvability.
    #[error("singular operator: {detail} (near-zero eigenvalue {eigenvalue:.6e})")]
    Singular { eigenvalue: f64, detail: String },

    /// Fingerprint families failed the cross-product identity or the aligned
    /// residual exceeded its tolerance.
    #[error("alignment failure: {detail} (max violation {max_violation:.6e})")]
    Alignment { max_violation: f64, detail: String },

    /// A dense or sparse factorization failed inside the linear-algebra
    /// backend.
    #[error("linear algebra backend: {0}")]
    Backend(String),

    /// Writing artifacts failed.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
