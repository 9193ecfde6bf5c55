//! Numerical laboratory for parabolic inverse problems with rough zero-order
//! coefficients.
//!
//! The crate discretizes the heat operator `d/dt - Δ + V` on tensor-product
//! grids over boxes in dimension 1 and 2, with potentials `V` that may be
//! unbounded in the sup norm while staying small in an integral norm. On top
//! of the spectral solver it builds the experiments the project is about:
//!
//! * semigroup evaluation on the closed right half-plane and its structural
//!   checks (composition, growth, derivative bounds, PDE residual),
//! * interior- and boundary-driven forward solves via exact exponential
//!   integration of mode ODEs,
//! * boundary measurements, Dirichlet-series kernels, exponential-sum
//!   extraction and fingerprint alignment for distinguishing potentials,
//! * low-frequency projections, logarithmic stability moduli, observability
//!   audits and initial-data reconstruction,
//! * discrete-harmonic samples, three-ball inequalities, chains of balls and
//!   global quantitative unique-continuation audits.
//!
//! Everything numeric is generic over the floating scalar through [`Scalar`];
//! the concrete aliases at the crate root fix `f64`, which is what the
//! command-line driver and the acceptance suite use.

pub mod error;
pub mod logval;
pub mod mesh;
pub mod rng;
pub mod report;
pub mod scalar;

pub mod potential_spectral;
pub mod semigroup;
pub mod forward_ibvp;
pub mod boundary_inverse;
pub mod observability;
pub mod unique_continuation;

mod linalg;

pub use error::{Error, Result};
pub use logval::LogVal;
pub use scalar::Scalar;

/// Concrete scalar used by the CLI driver and the acceptance suite.
pub type Real = f64;

/// Tensor-product grid over a box, `f64` instantiation.
pub type GridR = mesh::Grid<Real>;
/// Interior nodal field, `f64` instantiation.
pub type FieldR = mesh::Field<Real>;
/// Boundary nodal data, `f64` instantiation.
pub type BoundaryDataR = mesh::BoundaryData<Real>;
/// Dirichlet eigensystem, `f64` instantiation.
pub type EigenSystemR = potential_spectral::EigenSystem<Real>;
