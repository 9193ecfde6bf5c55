//! Thin wrappers around the faer kernels used by the crate.
//!
//! Every routine converts faer's error types into [`crate::Error`] and fixes
//! the conventions the rest of the crate relies on: eigenvalues ascending,
//! singular values checked before inversion, sparse matrices assembled from
//! summed triplets.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu as SparseLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use num_complex::Complex;

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Eigendecomposition of a symmetric matrix. Eigenvalues ascending,
/// eigenvectors the matching columns, orthonormal.
pub(crate) fn sym_eigen<S: Scalar>(a: &Mat<S>) -> Result<(Vec<S>, Mat<S>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Backend(format!("symmetric eigensolve failed: {e:?}")))?;
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let s = evd.S().column_vector();
    order.sort_by(|&i, &j| s[i].partial_cmp(&s[j]).expect("eigenvalues are finite"));
    let values: Vec<S> = order.iter().map(|&i| s[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| evd.U()[(r, order[c])]);
    Ok((values, vectors))
}

/// Solution of a dense square system by partial-pivoting LU.
pub(crate) fn lu_solve<S: Scalar>(a: &Mat<S>, b: &[S]) -> Result<Vec<S>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Backend("lu_solve needs a square system".into()));
    }
    let rhs = Mat::from_fn(n, 1, |r, _| b[r]);
    let x = a.partial_piv_lu().solve(&rhs);
    Ok((0..n).map(|r| x[(r, 0)]).collect())
}

/// Truncated-SVD least-squares solution.
pub(crate) struct TruncatedLsq<S> {
    pub solution: Vec<S>,
    /// Retained singular directions.
    pub rank: usize,
    pub sigma_max: S,
    /// `sigma_max / sigma_min_kept` over the retained directions.
    pub condition: S,
}

/// Minimizes `|a x - b|` keeping only singular directions with
/// `sigma > rel_tol * sigma_max`.
pub(crate) fn svd_lsq<S: Scalar>(a: &Mat<S>, b: &[S], rel_tol: S) -> Result<TruncatedLsq<S>> {
    if a.nrows() != b.len() {
        return Err(Error::Backend("svd_lsq dimension mismatch".into()));
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Backend(format!("svd failed: {e:?}")))?;
    let k = a.nrows().min(a.ncols());
    let sv = svd.S().column_vector();
    let sigma_max = if k > 0 { sv[0] } else { S::zero() };
    if !(sigma_max > S::zero()) {
        return Err(Error::Singular { eigenvalue: 0.0, detail: "zero matrix in least squares".into() });
    }
    let mut solution = vec![S::zero(); a.ncols()];
    let mut rank = 0;
    let mut sigma_min_kept = sigma_max;
    for j in 0..k {
        let sigma = sv[j];
        if sigma > rel_tol * sigma_max {
            rank += 1;
            if sigma < sigma_min_kept {
                sigma_min_kept = sigma;
            }
            let mut utb = S::zero();
            for r in 0..a.nrows() {
                utb = utb + svd.U()[(r, j)] * b[r];
            }
            let coef = utb / sigma;
            for c in 0..a.ncols() {
                solution[c] = solution[c] + coef * svd.V()[(c, j)];
            }
        }
    }
    Ok(TruncatedLsq { solution, rank, sigma_max, condition: sigma_max / sigma_min_kept })
}

/// Eigenvalues of a general square real matrix.
pub(crate) fn eigenvalues_general<S: Scalar>(a: &Mat<S>) -> Result<Vec<Complex<S>>> {
    a.eigenvalues()
        .map_err(|e| Error::Backend(format!("general eigensolve failed: {e:?}")))
}

/// Column-compressed sparse matrix assembled from triplets; duplicate
/// entries sum.
pub(crate) fn assemble_csc<S: Scalar>(
    n: usize,
    triplets: &[(usize, usize, S)],
) -> Result<SparseColMat<usize, S>> {
    let entries: Vec<Triplet<usize, usize, S>> =
        triplets.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
    SparseColMat::try_new_from_triplets(n, n, &entries)
        .map_err(|e| Error::Backend(format!("sparse assembly failed: {e:?}")))
}

/// Cached factorization of a sparse symmetric matrix. Cholesky when the
/// matrix is positive definite, LU otherwise.
pub(crate) enum SparseFactor<S: Scalar> {
    Chol(Llt<usize, S>),
    Lu(SparseLu<usize, S>),
}

impl<S: Scalar> SparseFactor<S> {
    /// Attempts Cholesky, falling back to LU for indefinite matrices.
    /// Reports whether the definite route succeeded.
    pub(crate) fn new(mat: &SparseColMat<usize, S>) -> Result<(Self, bool)> {
        match mat.sp_cholesky(Side::Lower) {
            Ok(f) => Ok((SparseFactor::Chol(f), true)),
            Err(_) => {
                let f = mat
                    .sp_lu()
                    .map_err(|e| Error::Backend(format!("sparse LU failed: {e:?}")))?;
                Ok((SparseFactor::Lu(f), false))
            }
        }
    }

    pub(crate) fn solve(&self, b: &[S]) -> Vec<S> {
        let rhs = Mat::from_fn(b.len(), 1, |r, _| b[r]);
        let x = match self {
            SparseFactor::Chol(f) => f.solve(&rhs),
            SparseFactor::Lu(f) => f.solve(&rhs),
        };
        (0..b.len()).map(|r| x[(r, 0)]).collect()
    }
}
