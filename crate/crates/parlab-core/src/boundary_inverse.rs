//! Boundary measurements that separate zero-order coefficients.
//!
//! A potential is probed by driving the boundary with smooth inputs and
//! recording the Neumann trace of the response on a receiver patch at a
//! fixed time. Two potentials are compared through those records, through
//! the comparison kernel built from both eigensystems, and through the
//! exponents hidden in single-point kernel traces. The pieces:
//!
//! * [`neumann_measurement`]: one probe, one receiver patch, one record,
//! * [`build_series_kernel`]: tabulated two-system comparison kernel with a
//!   truncation-tail estimate,
//! * [`extract_dirichlet_series`]: exponent and amplitude recovery from a
//!   uniformly sampled time trace by the matrix-pencil method,
//! * [`orthogonal_alignment`]: the orthogonal gauge between two vector
//!   families that share pointwise products,
//! * [`distinguishability_experiment`]: the audit correlating measurement
//!   gaps with the integral distance between two potentials.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use faer::Mat;
use rayon::prelude::*;

use crate::forward_ibvp::{integrate_modes, BoundaryInput, TimeKnots, TimeWindow};
use crate::linalg;
use crate::logval::LogVal;
use crate::mesh::{BoundaryData, Field, Mask, MaskKind};
use crate::potential_spectral::{eigendecompose, EigenSystem, Potential};
use crate::report::AuditReport;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Relative singular-value threshold for rank decisions.
const RANK_REL_TOL: f64 = 1e-8;
/// Relative tolerance for merging nearby extracted exponents.
const EXPONENT_CLUSTER_REL_TOL: f64 = 1e-6;
/// Tolerance on the shared-product precheck and the aligned residual.
const ALIGNMENT_TOL: f64 = 1e-8;
/// Tolerance on the orthogonality defect of the computed gauge.
const ORTHOGONALITY_TOL: f64 = 1e-10;

fn s_of<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count fits the scalar")
}

/// Neumann trace of a driven solve on a receiver patch at a fixed time.
#[derive(Clone, Debug)]
pub struct MeasurementRecord<S: Scalar> {
    probe_id: String,
    t_star: S,
    mask: Mask,
    trace: BoundaryData<S>,
}

impl<S: Scalar> MeasurementRecord<S> {
    /// Validates kind, support, and finiteness. The trace must vanish off
    /// the receiver mask.
    pub fn new(
        probe_id: impl Into<String>,
        t_star: S,
        mask: Mask,
        trace: BoundaryData<S>,
    ) -> Result<Self> {
        if mask.kind() != MaskKind::Boundary {
            return Err(Error::Mask("receiver mask must be boundary kind".into()));
        }
        if mask.count() == 0 {
            return Err(Error::Mask("receiver mask selects no nodes".into()));
        }
        if mask.len() != trace.grid().n_boundary() {
            return Err(Error::GridMismatch("receiver mask and trace disagree".into()));
        }
        if !(t_star > S::zero() && t_star.is_finite()) {
            return Err(Error::Domain("measurement time must be positive and finite".into()));
        }
        for (b, v) in trace.values().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain("measurement trace must be finite".into()));
            }
            if !mask.contains(b) && *v != S::zero() {
                return Err(Error::Support(format!(
                    "measurement trace carries value off the receiver mask at node {b}"
                )));
            }
        }
        Ok(MeasurementRecord { probe_id: probe_id.into(), t_star, mask, trace })
    }

    pub fn probe_id(&self) -> &str {
        &self.probe_id
    }

    pub fn t_star(&self) -> S {
        self.t_star
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn trace(&self) -> &BoundaryData<S> {
        &self.trace
    }

    /// `L^2` distance of the traces over the shared receiver mask.
    pub fn gap_to(&self, other: &Self) -> Result<S> {
        if self.mask != other.mask {
            return Err(Error::Mask("records measured on different receiver masks".into()));
        }
        let tol = S::lit(1e-12) * (S::one() + self.t_star.abs());
        if (self.t_star - other.t_star).abs() > tol {
            return Err(Error::Domain("records measured at different times".into()));
        }
        let diff: Vec<S> = self
            .trace
            .values()
            .iter()
            .zip(other.trace.values())
            .map(|(a, b)| *a - *b)
            .collect();
        BoundaryData::from_values(self.trace.grid(), diff)?.l2_norm(Some(&self.mask))
    }

    /// CSV rows `node,value` over the receiver mask.
    pub fn csv(&self) -> String {
        let mut out = String::from("node,value\n");
        for b in self.mask.indices() {
            let _ = writeln!(out, "{},{:e}", b, self.trace.values()[b].to_f64_lossy());
        }
        out
    }
}

/// Difference of two spectral heat kernels tabulated on a product of
/// boundary patches and time knots.
#[derive(Clone, Debug)]
pub struct SeriesKernel<S: Scalar> {
    xi_nodes: Vec<usize>,
    eta_nodes: Vec<usize>,
    s_knots: Vec<S>,
    t_star: S,
    k_max: usize,
    tail_bound: S,
    values: Vec<S>,
}

impl<S: Scalar> SeriesKernel<S> {
    fn index(&self, xi: usize, eta: usize, s: usize) -> usize {
        (xi * self.eta_nodes.len() + eta) * self.s_knots.len() + s
    }

    /// Tabulated value at (source node `xi`, receiver node `eta`, knot `s`);
    /// indices are positions in the node and knot lists.
    pub fn value(&self, xi: usize, eta: usize, s: usize) -> S {
        self.values[self.index(xi, eta, s)]
    }

    /// Boundary indices of the source patch, ascending.
    pub fn xi_nodes(&self) -> &[usize] {
        &self.xi_nodes
    }

    /// Boundary indices of the receiver patch, ascending.
    pub fn eta_nodes(&self) -> &[usize] {
        &self.eta_nodes
    }

    pub fn s_knots(&self) -> &[S] {
        &self.s_knots
    }

    pub fn t_star(&self) -> S {
        self.t_star
    }

    /// Number of leading modes kept from each system.
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Bound on the contribution of the discarded trailing modes.
    pub fn tail_bound(&self) -> S {
        self.tail_bound
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |a, v| a.max(v.abs()))
    }

    /// Time trace at one (source, receiver) node pair.
    pub fn trace_at(&self, xi: usize, eta: usize) -> Vec<S> {
        (0..self.s_knots.len()).map(|l| self.value(xi, eta, l)).collect()
    }

    /// CSV rows `xi,eta,s,value` in tabulation order.
    pub fn csv(&self) -> String {
        let mut out = String::from("xi,eta,s,value\n");
        for (i, xi) in self.xi_nodes.iter().enumerate() {
            for (j, eta) in self.eta_nodes.iter().enumerate() {
                for (l, s) in self.s_knots.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{:e},{:e}",
                        xi,
                        eta,
                        s.to_f64_lossy(),
                        self.value(i, j, l).to_f64_lossy()
                    );
                }
            }
        }
        out
    }
}

/// Exponents and amplitudes fitted to a uniformly sampled time trace.
///
/// The model is `g(s) = Σ_k a_k e^{-μ_k (t* - s)}` with strictly increasing
/// exponents `μ_k`. When the numerical rank of the trace stays below the
/// requested number of terms, the fit carries fewer terms and is flagged.
#[derive(Clone, Debug)]
pub struct ExponentialSumFit<S: Scalar> {
    exponents: Vec<S>,
    coefficients: Vec<S>,
    residual: S,
    t_star: S,
    requested: usize,
    degenerate: bool,
}

impl<S: Scalar> ExponentialSumFit<S> {
    /// Fitted exponents, strictly increasing.
    pub fn exponents(&self) -> &[S] {
        &self.exponents
    }

    /// Amplitudes matching [`Self::exponents`] order.
    pub fn coefficients(&self) -> &[S] {
        &self.coefficients
    }

    /// Largest misfit against the input trace over the knots.
    pub fn residual(&self) -> S {
        self.residual
    }

    pub fn t_star(&self) -> S {
        self.t_star
    }

    /// Number of terms asked for.
    pub fn requested(&self) -> usize {
        self.requested
    }

    /// True when rank truncation or clustering returned fewer terms than
    /// requested.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn n_terms(&self) -> usize {
        self.exponents.len()
    }

    /// Model value `Σ_k a_k e^{-μ_k (t* - s)}`.
    pub fn evaluate(&self, s: S) -> S {
        let mut acc = S::zero();
        for (mu, a) in self.exponents.iter().zip(&self.coefficients) {
            acc = acc + *a * (-*mu * (self.t_star - s)).exp();
        }
        acc
    }

    /// CSV rows `exponent,coefficient` in ascending exponent order.
    pub fn csv(&self) -> String {
        let mut out = String::from("exponent,coefficient\n");
        for (mu, a) in self.exponents.iter().zip(&self.coefficients) {
            let _ = writeln!(out, "{:e},{:e}", mu.to_f64_lossy(), a.to_f64_lossy());
        }
        out
    }
}

/// Records the Neumann trace of the boundary-driven solve at `t_star` on
/// the receiver mask `gamma1`.
///
/// The trace is assembled mode-wise: the per-mode convolution coefficients
/// of the driven solve at `t_star` weight the modal Neumann traces. The
/// probe must be sampled so that `t_star` lands on one of its knots, and
/// the probe's input window must close by `t_star`.
pub fn neumann_measurement<S: Scalar>(
    sys: &EigenSystem<S>,
    probe: &BoundaryInput<S>,
    t_star: S,
    gamma1: &Mask,
    probe_id: impl Into<String>,
) -> Result<MeasurementRecord<S>> {
    if gamma1.kind() != MaskKind::Boundary || gamma1.count() == 0 {
        return Err(Error::Mask("receiver mask must be a nonempty boundary mask".into()));
    }
    let grid = sys.grid();
    if probe.frame(0).grid() != grid {
        return Err(Error::GridMismatch("probe and eigensystem live on different grids".into()));
    }
    if gamma1.len() != grid.n_boundary() {
        return Err(Error::GridMismatch("receiver mask sized for a different grid".into()));
    }
    let knots = probe.knots();
    let dt = knots.dt();
    let pos = t_star / dt;
    let idx = pos.round().to_f64_lossy() as usize;
    if (pos - s_of::<S>(idx)).abs() > S::lit(1e-9) {
        return Err(Error::Domain("measurement time must land on a probe knot".into()));
    }
    if idx == 0 || idx >= knots.count() {
        return Err(Error::Domain(format!(
            "measurement time {} outside the probe's knot span",
            t_star.to_f64_lossy()
        )));
    }
    let slack = S::lit(1e-9) * dt;
    if probe.support().1 > t_star + slack {
        return Err(Error::Support("probe input window must close by the measurement time".into()));
    }

    let n = sys.n_modes();
    let mut modal = Vec::with_capacity(idx + 1);
    for i in 0..=idx {
        let frame = probe.frame(i);
        let mut row = Vec::with_capacity(n);
        for k in 0..n {
            row.push(-frame.pair(sys.psi(k), Some(probe.mask()))?);
        }
        modal.push(row);
    }
    let sub_knots = TimeKnots::new(dt, idx + 1)?;
    let coeffs = integrate_modes(sys, sub_knots, &modal)?;
    let last = &coeffs[idx];

    let mut values = vec![S::zero(); grid.n_boundary()];
    for b in gamma1.indices() {
        let mut acc = S::zero();
        for k in 0..n {
            acc = acc + last[k] * sys.psi(k).values()[b];
        }
        values[b] = acc;
    }
    let trace = BoundaryData::from_values(grid, values)?;
    MeasurementRecord::new(probe_id, t_star, gamma1.clone(), trace)
}

/// Tabulates the two-system comparison kernel
/// `K(ξ,η,s) = Σ_k e^{-λ^A_k (t*-s)} ψ^A_k(ξ) ψ^A_k(η) - (B term)`
/// on the product of the two patches and the given knots.
///
/// `k_max` truncates both mode sums; `None` keeps every computed mode. The
/// reported tail bound covers only the computed-but-discarded trailing
/// modes, evaluated at the latest knot where decay is weakest.
pub fn build_series_kernel<S: Scalar>(
    sys_a: &EigenSystem<S>,
    sys_b: &EigenSystem<S>,
    gamma0: &Mask,
    gamma1: &Mask,
    s_knots: &[S],
    t_star: S,
    k_max: Option<usize>,
) -> Result<SeriesKernel<S>> {
    if sys_a.grid() != sys_b.grid() {
        return Err(Error::GridMismatch("eigensystems live on different grids".into()));
    }
    for (name, m) in [("source", gamma0), ("receiver", gamma1)] {
        if m.kind() != MaskKind::Boundary || m.count() == 0 {
            return Err(Error::Mask(format!("{name} mask must be a nonempty boundary mask")));
        }
        if m.len() != sys_a.grid().n_boundary() {
            return Err(Error::GridMismatch(format!("{name} mask sized for a different grid")));
        }
    }
    if s_knots.is_empty() {
        return Err(Error::Domain("kernel needs at least one time knot".into()));
    }
    if !(t_star > S::zero() && t_star.is_finite()) {
        return Err(Error::Domain("measurement time must be positive and finite".into()));
    }
    for (l, s) in s_knots.iter().enumerate() {
        if !(s.is_finite() && *s > S::zero() && *s < t_star) {
            return Err(Error::Domain(format!(
                "kernel knot {l} must lie strictly between 0 and the measurement time"
            )));
        }
        if l > 0 && !(*s > s_knots[l - 1]) {
            return Err(Error::Domain("kernel knots must be strictly ascending".into()));
        }
    }
    let cap = k_max.unwrap_or(sys_a.n_modes().max(sys_b.n_modes()));
    if cap == 0 {
        return Err(Error::Config("kernel truncation must keep at least one mode".into()));
    }

    let xi_nodes: Vec<usize> = gamma0.indices().collect();
    let eta_nodes: Vec<usize> = gamma1.indices().collect();
    let mut values = vec![S::zero(); xi_nodes.len() * eta_nodes.len() * s_knots.len()];
    let accumulate = |sys: &EigenSystem<S>, sign: S, values: &mut Vec<S>| {
        let keep = cap.min(sys.n_modes());
        for k in 0..keep {
            let lambda = sys.lambda(k);
            let psi = sys.psi(k).values();
            let decays: Vec<S> = s_knots.iter().map(|s| (-lambda * (t_star - *s)).exp()).collect();
            let mut pos = 0usize;
            for xi in &xi_nodes {
                let pxi = psi[*xi] * sign;
                for eta in &eta_nodes {
                    let peta = psi[*eta];
                    for d in &decays {
                        values[pos] = values[pos] + pxi * peta * *d;
                        pos += 1;
                    }
                }
            }
        }
    };
    accumulate(sys_a, S::one(), &mut values);
    accumulate(sys_b, -S::one(), &mut values);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("kernel overflowed; spectrum too negative for this window".into()));
    }

    let s_max = *s_knots.last().expect("nonempty");
    let mut tail = S::zero();
    for sys in [sys_a, sys_b] {
        for k in cap.min(sys.n_modes())..sys.n_modes() {
            let psi = sys.psi(k).values();
            let m = xi_nodes
                .iter()
                .chain(&eta_nodes)
                .fold(S::zero(), |a, b| a.max(psi[*b].abs()));
            tail = tail + (-sys.lambda(k) * (t_star - s_max)).exp() * m * m;
        }
    }

    Ok(SeriesKernel {
        xi_nodes,
        eta_nodes,
        s_knots: s_knots.to_vec(),
        t_star,
        k_max: cap,
        tail_bound: tail,
        values,
    })
}

/// Hankel matrix pair for the matrix-pencil method: `h0[i][j] = g[i+j]`,
/// `h1[i][j] = g[i+j+1]`, with `rows + cols = len(g)`.
fn hankel_pair<S: Scalar>(g: &[S]) -> (Mat<S>, Mat<S>) {
    let n = g.len();
    let cols = n / 2;
    let rows = n - cols;
    let h0 = Mat::from_fn(rows, cols, |i, j| g[i + j]);
    let h1 = Mat::from_fn(rows, cols, |i, j| g[i + j + 1]);
    (h0, h1)
}

/// Fits `g(s_i) = Σ_k a_k e^{-μ_k (t_star - s_i)}` with at most `m_max`
/// terms by the matrix-pencil method.
///
/// Rank is decided by the singular values of the Hankel matrix at relative
/// threshold `1e-8`; pencil eigenvalues that are not positive reals are
/// discarded; exponents closer than relative `1e-6` merge into their mean;
/// amplitudes are refit by least squares on the surviving exponents. The
/// residual is the largest knot misfit. Fewer surviving terms than
/// requested set the degeneracy flag.
pub fn extract_dirichlet_series<S: Scalar>(
    s_knots: &[S],
    trace: &[S],
    t_star: S,
    m_max: usize,
) -> Result<ExponentialSumFit<S>> {
    if m_max == 0 {
        return Err(Error::Config("at least one term must be requested".into()));
    }
    if s_knots.len() != trace.len() {
        return Err(Error::Config("trace and knots must have equal length".into()));
    }
    let n = s_knots.len();
    if n < 2 * m_max + 2 {
        return Err(Error::Config(format!(
            "{m_max} terms need at least {} knots, got {n}",
            2 * m_max + 2
        )));
    }
    let ds = s_knots[1] - s_knots[0];
    if !(ds > S::zero()) {
        return Err(Error::Config("knots must be strictly ascending".into()));
    }
    for i in 1..n {
        let step = s_knots[i] - s_knots[i - 1];
        if (step - ds).abs() > S::lit(1e-9) * ds {
            return Err(Error::Config("knots must be uniformly spaced".into()));
        }
    }
    if !(t_star.is_finite() && t_star > s_knots[n - 1]) {
        return Err(Error::Domain("measurement time must lie past the last knot".into()));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("trace values must be finite".into()));
    }

    let g_max = trace.iter().fold(S::zero(), |a, v| a.max(v.abs()));
    if g_max == S::zero() {
        return Ok(ExponentialSumFit {
            exponents: Vec::new(),
            coefficients: Vec::new(),
            residual: S::zero(),
            t_star,
            requested: m_max,
            degenerate: true,
        });
    }

    // Pencil eigenvalues of (H1, H0) restricted to the numerical range of
    // H0 are the knot-to-knot ratios e^{μ ds}.
    let (h0, h1) = hankel_pair(trace);
    let svd = h0
        .thin_svd()
        .map_err(|e| Error::Backend(format!("hankel svd failed: {e:?}")))?;
    let sv = svd.S().column_vector();
    let k = h0.nrows().min(h0.ncols());
    let sigma_max = sv[0];
    let mut rank = 0;
    for j in 0..k {
        if sv[j] >= S::lit(RANK_REL_TOL) * sigma_max {
            rank += 1;
        }
    }
    let rank = rank.min(m_max);
    let mut raw_mu: Vec<S> = Vec::new();
    if rank > 0 {
        let mut a = Mat::<S>::zeros(rank, rank);
        for i in 0..rank {
            for j in 0..rank {
                let mut acc = S::zero();
                for p in 0..h1.nrows() {
                    for q in 0..h1.ncols() {
                        acc = acc + svd.U()[(p, i)] * h1[(p, q)] * svd.V()[(q, j)];
                    }
                }
                a[(i, j)] = acc / sv[j];
            }
        }
        let eig = linalg::eigenvalues_general(&a)?;
        for z in eig {
            if z.im.abs() <= S::lit(1e-8) * (S::one() + z.re.abs()) && z.re > S::zero() {
                raw_mu.push(z.re.ln() / ds);
            }
        }
    }
    raw_mu.sort_by(|a, b| a.partial_cmp(b).expect("exponents are finite"));

    // Merge exponents within relative 1e-6 of the group head.
    let mut groups: Vec<Vec<S>> = Vec::new();
    for mu in raw_mu {
        match groups.last_mut() {
            Some(grp)
                if (mu - grp[0]).abs()
                    <= S::lit(EXPONENT_CLUSTER_REL_TOL) * (S::one() + grp[0].abs()) =>
            {
                grp.push(mu)
            }
            _ => groups.push(vec![mu]),
        }
    }
    let exponents: Vec<S> = groups
        .iter()
        .map(|grp| grp.iter().fold(S::zero(), |a, b| a + *b) / s_of::<S>(grp.len()))
        .collect();

    let m = exponents.len();
    let (coefficients, residual) = if m == 0 {
        (Vec::new(), g_max)
    } else {
        let design = Mat::from_fn(n, m, |i, j| (-exponents[j] * (t_star - s_knots[i])).exp());
        let lsq = linalg::svd_lsq(&design, trace, S::lit(1e-12))?;
        let mut worst = S::zero();
        for i in 0..n {
            let mut fit = S::zero();
            for j in 0..m {
                fit = fit + design[(i, j)] * lsq.solution[j];
            }
            worst = worst.max((fit - trace[i]).abs());
        }
        (lsq.solution, worst)
    };

    Ok(ExponentialSumFit {
        exponents,
        coefficients,
        residual,
        t_star,
        requested: m_max,
        degenerate: m < m_max,
    })
}

/// Orthogonal Procrustes gauge: the orthogonal matrix closest to mapping
/// the rows of `fam_b` onto the rows of `fam_a`. No identity precheck.
fn procrustes_gauge<S: Scalar>(fam_a: &[Vec<S>], fam_b: &[Vec<S>]) -> Result<Mat<S>> {
    let m = fam_a.len();
    let l = fam_a[0].len();
    let cross = Mat::from_fn(m, m, |i, j| {
        let mut acc = S::zero();
        for x in 0..l {
            acc = acc + fam_a[i][x] * fam_b[j][x];
        }
        acc
    });
    let svd = cross
        .thin_svd()
        .map_err(|e| Error::Backend(format!("cross-gram svd failed: {e:?}")))?;
    let mut p = Mat::<S>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let mut acc = S::zero();
            for r in 0..m {
                acc = acc + svd.U()[(i, r)] * svd.V()[(j, r)];
            }
            p[(i, j)] = acc;
        }
    }
    Ok(p)
}

fn family_rank<S: Scalar>(fam: &[Vec<S>]) -> Result<usize> {
    let a = Mat::from_fn(fam.len(), fam[0].len(), |i, j| fam[i][j]);
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Backend(format!("family svd failed: {e:?}")))?;
    let sv = svd.S().column_vector();
    let k = a.nrows().min(a.ncols());
    if k == 0 || !(sv[0] > S::zero()) {
        return Ok(0);
    }
    Ok((0..k).filter(|&j| sv[j] >= S::lit(RANK_REL_TOL) * sv[0]).count())
}

/// Orthogonal matrix `P` with `fam_a ≈ P · fam_b`, for families that share
/// their pointwise product sums.
///
/// The families must satisfy `Σ_k a_k(ξ) a_k(η) = Σ_k b_k(ξ) b_k(η)` at
/// every sample pair within `1e-8` (checked first). `P` comes from the SVD
/// of the cross-Gram matrix; the result must reproduce `fam_a` within
/// `1e-8` and be orthogonal within `1e-10`, otherwise the call fails with
/// the largest violation.
pub fn orthogonal_alignment<S: Scalar>(fam_a: &[Vec<S>], fam_b: &[Vec<S>]) -> Result<Mat<S>> {
    if fam_a.is_empty() || fam_b.is_empty() {
        return Err(Error::Config("alignment needs nonempty families".into()));
    }
    let l = fam_a[0].len();
    if l == 0 {
        return Err(Error::Config("alignment needs at least one sample point".into()));
    }
    for v in fam_a.iter().chain(fam_b) {
        if v.len() != l {
            return Err(Error::Config("family vectors must share one sample set".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("family vectors must be finite".into()));
        }
    }

    // Pointwise product sums must agree before any gauge can exist.
    let mut violation = S::zero();
    let mut scale = S::one();
    for xi in 0..l {
        for eta in xi..l {
            let mut ga = S::zero();
            for a in fam_a {
                ga = ga + a[xi] * a[eta];
            }
            let mut gb = S::zero();
            for b in fam_b {
                gb = gb + b[xi] * b[eta];
            }
            violation = violation.max((ga - gb).abs());
            scale = scale.max(ga.abs()).max(gb.abs());
        }
    }
    if violation > S::lit(ALIGNMENT_TOL) * scale {
        return Err(Error::Alignment {
            max_violation: violation.to_f64_lossy(),
            detail: "pointwise product sums of the families disagree".into(),
        });
    }
    if fam_a.len() != fam_b.len() {
        let (ra, rb) = (family_rank(fam_a)?, family_rank(fam_b)?);
        return Err(Error::Alignment {
            max_violation: (fam_a.len() as f64 - fam_b.len() as f64).abs(),
            detail: format!(
                "family sizes {} and {} differ (numerical ranks {ra} and {rb})",
                fam_a.len(),
                fam_b.len()
            ),
        });
    }

    let m = fam_a.len();
    let p = procrustes_gauge(fam_a, fam_b)?;

    let mut ortho_defect = S::zero();
    for i in 0..m {
        for j in 0..m {
            let mut acc = S::zero();
            for r in 0..m {
                acc = acc + p[(r, i)] * p[(r, j)];
            }
            let target = if i == j { S::one() } else { S::zero() };
            ortho_defect = ortho_defect.max((acc - target).abs());
        }
    }
    if ortho_defect > S::lit(ORTHOGONALITY_TOL) {
        return Err(Error::Alignment {
            max_violation: ortho_defect.to_f64_lossy(),
            detail: "computed gauge is not orthogonal".into(),
        });
    }

    let mut sup_a = S::one();
    for a in fam_a {
        for x in a {
            sup_a = sup_a.max(x.abs());
        }
    }
    let mut residual = S::zero();
    for i in 0..m {
        for x in 0..l {
            let mut mapped = S::zero();
            for j in 0..m {
                mapped = mapped + p[(i, j)] * fam_b[j][x];
            }
            residual = residual.max((mapped - fam_a[i][x]).abs());
        }
    }
    if residual > S::lit(ALIGNMENT_TOL) * sup_a {
        return Err(Error::Alignment {
            max_violation: residual.to_f64_lossy(),
            detail: "gauge does not map the second family onto the first".into(),
        });
    }
    Ok(p)
}

/// Index groups on which both systems report the same eigenvalue
/// clustering: the common refinement of the two cluster partitions,
/// restricted to the leading `k_max` modes.
fn common_clusters<S: Scalar>(
    sys_a: &EigenSystem<S>,
    sys_b: &EigenSystem<S>,
    k_max: usize,
) -> Vec<Vec<usize>> {
    let mut boundary = vec![false; k_max + 1];
    boundary[0] = true;
    boundary[k_max] = true;
    for sys in [sys_a, sys_b] {
        let mut start = 0;
        for c in sys.clusters() {
            if start < k_max {
                boundary[start] = true;
            }
            start += c.len();
        }
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    for k in 0..k_max {
        if boundary[k] && !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        current.push(k);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Fingerprint vectors sampled on the mask nodes, weighted by the square
/// root of the surface measure so Euclidean operations realize `L^2(Γ)`.
fn weighted_rows<S: Scalar>(sys: &EigenSystem<S>, modes: &[usize], nodes: &[(usize, S)]) -> Vec<Vec<S>> {
    modes
        .iter()
        .map(|&k| {
            let psi = sys.psi(k).values();
            nodes.iter().map(|&(b, w)| psi[b] * w).collect()
        })
        .collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

/// Interpolation weights between two potentials.
const BLEND_STEPS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Compares two potentials through boundary measurements.
///
/// For each blend `V_θ = (1-θ) V_1 + θ V_2` over `θ ∈ {0.25, 0.5, 0.75, 1}`
/// and each probe, the audit records the `L^2(Γ_1)` gap between the
/// measurements under `V_1` and under `V_θ`, against the integral distance
/// `‖V_θ - V_1‖_{n/2}`. The full pair `θ = 1` additionally reports the
/// spectral gap and the fingerprint gap on `Γ_0 ∪ Γ_1` after sign and
/// cluster alignment. The trend sample carries the Pearson correlation of
/// gap against distance across all blends and probes.
///
/// Measurements happen at the window's horizon; every probe must be
/// supported inside the window and sampled with the horizon on a knot.
pub fn distinguishability_experiment<S: Scalar>(
    v1: &Potential<S>,
    v2: &Potential<S>,
    probes: &[BoundaryInput<S>],
    window: &TimeWindow<S>,
    gamma0: &Mask,
    gamma1: &Mask,
) -> Result<AuditReport> {
    let grid = v1.grid();
    if grid != v2.grid() {
        return Err(Error::GridMismatch("potentials live on different grids".into()));
    }
    if probes.is_empty() {
        return Err(Error::Config("experiment needs at least one probe".into()));
    }
    for (name, m) in [("source", gamma0), ("receiver", gamma1)] {
        if m.kind() != MaskKind::Boundary || m.count() == 0 {
            return Err(Error::Mask(format!("{name} mask must be a nonempty boundary mask")));
        }
        if m.len() != grid.n_boundary() {
            return Err(Error::GridMismatch(format!("{name} mask sized for a different grid")));
        }
    }
    for probe in probes {
        if probe.mask().indices().any(|b| !gamma0.contains(b)) {
            return Err(Error::Mask("probe mask must lie inside the source patch".into()));
        }
    }
    let t_star = window.horizon();

    let sys_base = eigendecompose(grid, v1, None)?;
    let base_records: Vec<MeasurementRecord<S>> = probes
        .par_iter()
        .enumerate()
        .map(|(i, probe)| neumann_measurement(&sys_base, probe, t_star, gamma1, format!("probe-{i}")))
        .collect::<Result<_>>()?;

    let delta: Vec<S> =
        v1.values().iter().zip(v2.values()).map(|(a, b)| *b - *a).collect();
    let norm_tag = v1.norm_exponent().to_f64_lossy();

    let mut gaps = Vec::new();
    let mut sizes = Vec::new();
    let mut samples = Vec::new();
    let mut sys_full = None;
    for theta in BLEND_STEPS {
        let th = S::lit(theta);
        let blend: Vec<S> = v1
            .values()
            .iter()
            .zip(&delta)
            .map(|(a, d)| *a + th * *d)
            .collect();
        let v_theta = Potential::from_field(Field::from_values(grid, blend)?)?;
        let diff = Potential::from_field(Field::from_values(
            grid,
            v_theta.values().iter().zip(v1.values()).map(|(a, b)| *a - *b).collect(),
        )?)?;
        let size = diff.ln2_norm();
        let sys_theta = eigendecompose(grid, &v_theta, None)?;
        let records: Vec<MeasurementRecord<S>> = probes
            .par_iter()
            .enumerate()
            .map(|(i, probe)| {
                neumann_measurement(&sys_theta, probe, t_star, gamma1, format!("probe-{i}"))
            })
            .collect::<Result<_>>()?;
        for (i, (rec, base)) in records.iter().zip(&base_records).enumerate() {
            let gap = rec.gap_to(base)?;
            gaps.push(gap.to_f64_lossy());
            sizes.push(size.to_f64_lossy());
            samples.push((format!("gap[theta={theta},probe={i}]"), gap, size));
        }
        if theta == 1.0 {
            sys_full = Some(sys_theta);
        }
    }
    let sys_full = sys_full.expect("blend grid contains 1");

    let k_max = sys_base.n_modes().min(sys_full.n_modes());
    let mut spectral_gap = S::zero();
    let mut spectral_arg = 0usize;
    for k in 0..k_max {
        let d = (sys_base.lambda(k) - sys_full.lambda(k)).abs();
        if d > spectral_gap {
            spectral_gap = d;
            spectral_arg = k;
        }
    }

    // Fingerprint gap on the union patch, gauge-aligned inside groups that
    // both spectra cluster together, sign-aligned on singletons.
    let union = gamma0.union(gamma1)?;
    let nodes: Vec<(usize, S)> =
        union.indices().map(|b| (b, grid.surface_measure(b).sqrt())).collect();
    let mut fingerprint_gap = S::zero();
    let mut fingerprint_arg = 0usize;
    for group in common_clusters(&sys_base, &sys_full, k_max) {
        let rows_a = weighted_rows(&sys_base, &group, &nodes);
        let rows_b = weighted_rows(&sys_full, &group, &nodes);
        let aligned: Vec<Vec<S>> = if group.len() == 1 {
            let plus: S = rows_a[0]
                .iter()
                .zip(&rows_b[0])
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .fold(S::zero(), |s, v| s + v);
            let minus: S = rows_a[0]
                .iter()
                .zip(&rows_b[0])
                .map(|(a, b)| (*a + *b) * (*a + *b))
                .fold(S::zero(), |s, v| s + v);
            let sign = if minus < plus { -S::one() } else { S::one() };
            vec![rows_b[0].iter().map(|v| *v * sign).collect()]
        } else {
            let p = procrustes_gauge(&rows_a, &rows_b)?;
            (0..group.len())
                .map(|i| {
                    (0..nodes.len())
                        .map(|x| {
                            let mut acc = S::zero();
                            for j in 0..group.len() {
                                acc = acc + p[(i, j)] * rows_b[j][x];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        for (pos, k) in group.iter().enumerate() {
            let d = rows_a[pos]
                .iter()
                .zip(&aligned[pos])
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .fold(S::zero(), |s, v| s + v)
                .sqrt();
            if d > fingerprint_gap {
                fingerprint_gap = d;
                fingerprint_arg = *k;
            }
        }
    }

    let correlation = pearson(&sizes, &gaps);
    let floor_one = |v: S| if v > S::zero() { v } else { S::one() };
    let full_size = *sizes.last().expect("blend grid is nonempty");
    let full_scale = floor_one(S::lit(full_size));

    let config = serde_json::json!({
        "probes": probes.len(),
        "blend_steps": BLEND_STEPS,
        "t_star": t_star.to_f64_lossy(),
        "modes": k_max,
        "source_nodes": gamma0.count(),
        "receiver_nodes": gamma1.count(),
        "norm_exponent": norm_tag,
    });
    let mut report = AuditReport::new("thm1", config)?;
    for (label, gap, size) in samples {
        let mut meta = BTreeMap::new();
        meta.insert("distance".into(), format!("{:e}", size.to_f64_lossy()));
        report.push_with_meta(
            label,
            LogVal::from_value(gap.to_f64_lossy()),
            LogVal::from_value(floor_one(size).to_f64_lossy()),
            meta,
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), spectral_arg.to_string());
    report.push_with_meta(
        "spectral",
        LogVal::from_value(spectral_gap.to_f64_lossy()),
        LogVal::from_value(full_scale.to_f64_lossy()),
        meta,
    );
    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), fingerprint_arg.to_string());
    report.push_with_meta(
        "fingerprint",
        LogVal::from_value(fingerprint_gap.to_f64_lossy()),
        LogVal::from_value(full_scale.to_f64_lossy()),
        meta,
    );
    let best_gap = gaps.iter().fold(0.0f64, |a, b| a.max(*b));
    let mut meta = BTreeMap::new();
    meta.insert("pearson".into(), format!("{correlation:.12}"));
    meta.insert("points".into(), gaps.len().to_string());
    report.push_with_meta(
        "trend",
        LogVal::from_value(best_gap),
        LogVal::from_value(full_scale.to_f64_lossy()),
        meta,
    );
    report.finalize()?;
    Ok(report)
}
