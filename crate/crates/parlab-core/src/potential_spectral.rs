//! Rough potentials, the discrete Dirichlet operator `-Δ_h + V`, its full
//! eigendecomposition, bilateral power-law envelopes of the spectrum, and
//! boundary spectral fingerprints.
//!
//! Potentials are nodal fields measured in the `L^{n/2}` quasi-norm, which
//! tolerates large values on small sets. Admissibility couples that norm to
//! the discrete Sobolev constant `σ` through `2 ϑ σ² < 1`, the coercivity
//! margin every downstream estimate relies on.
//!
//! Two gradient conventions coexist deliberately. Reported `H^1` norms use
//! the nodal centered/one-sided stencil of [`crate::mesh`]. Energies tied
//! to the operator (`σ`, admissibility) use the cell-difference quadratic
//! form `vol · wᵀ(-Δ_h)w`, which is positive definite on Dirichlet fields;
//! the nodal stencil is not (it annihilates parity patterns), so a Sobolev
//! supremum over it would be infinite.

use faer::Mat;

use crate::linalg;
use crate::mesh::{BoundaryData, Field, Grid, Mask, MaskKind, NodeRef};
use crate::rng::member_rng;
use crate::scalar::Scalar;
use crate::{Error, Result};
use rand::Rng;

/// Relative tolerance grouping near-equal eigenvalues into clusters.
pub const CLUSTER_REL_TOL: f64 = 1e-8;

/// Zero-order coefficient on a grid, measured in `L^{n/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential<S> {
    field: Field<S>,
}

impl<S: Scalar> Potential<S> {
    pub fn from_field(field: Field<S>) -> Result<Self> {
        if !field.values().iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("potential values must be finite".into()));
        }
        Ok(Potential { field })
    }

    pub fn from_fn(grid: &Grid<S>, f: impl FnMut(&[S]) -> S) -> Result<Self> {
        Self::from_field(Field::from_fn(grid, f))
    }

    pub fn zero(grid: &Grid<S>) -> Self {
        Potential { field: Field::zeros(grid) }
    }

    pub fn constant(grid: &Grid<S>, c: S) -> Result<Self> {
        Self::from_fn(grid, |_| c)
    }

    pub fn grid(&self) -> &Grid<S> {
        self.field.grid()
    }

    pub fn values(&self) -> &[S] {
        self.field.values()
    }

    pub fn field(&self) -> &Field<S> {
        &self.field
    }

    /// Exponent of the natural potential norm, `n/2`.
    pub fn norm_exponent(&self) -> S {
        S::from_usize(self.grid().dim()).expect("dim fits scalar") / S::lit(2.0)
    }

    /// `L^{n/2}` quasi-norm `(vol Σ |V|^{n/2})^{2/n}`. For `n = 1` the
    /// exponent is below one; the formula is applied directly.
    pub fn ln2_norm(&self) -> S {
        let p = self.norm_exponent();
        let vol = self.grid().cell_volume();
        let s = self
            .values()
            .iter()
            .map(|v| v.abs().powf(p))
            .fold(S::zero(), |a, b| a + b);
        (s * vol).powf(S::one() / p)
    }
}

/// Random spiky potential: superposed indicator balls with amplitudes
/// scaled by `h^{-gamma}`, emulating unbounded `L^{n/2}` members.
///
/// Requires `gamma < 4/n`; radii default to `1.5 h` so each spike covers at
/// least one node. Signs alternate, magnitudes are drawn from
/// `amplitude · U(0.5, 1.5)`.
pub fn rough_potential<S: Scalar>(
    grid: &Grid<S>,
    n_spikes: usize,
    gamma: S,
    amplitude: S,
    seed: u64,
) -> Result<Potential<S>> {
    let n = S::from_usize(grid.dim()).expect("dim fits scalar");
    if !(gamma < S::lit(4.0) / n) {
        return Err(Error::Config(format!(
            "spike exponent gamma must satisfy gamma < 4/n, got {gamma}"
        )));
    }
    if n_spikes == 0 || !amplitude.is_finite() {
        return Err(Error::Config("need n_spikes >= 1 and finite amplitude".into()));
    }
    let mut rng = member_rng(seed, 0);
    let h_min = (0..grid.dim()).map(|a| grid.spacing(a)).fold(S::infinity(), |a, b| a.min(b));
    let scale = amplitude * h_min.powf(-gamma);
    let radius = S::lit(1.5) * h_min;
    let mut values = vec![S::zero(); grid.n_interior()];
    for s in 0..n_spikes {
        let center: Vec<S> = grid
            .bounds()
            .iter()
            .map(|&(lo, hi)| lo + S::lit(rng.random::<f64>()) * (hi - lo))
            .collect();
        let mag = scale * S::lit(0.5 + rng.random::<f64>());
        let sign = if s % 2 == 0 { S::one() } else { -S::one() };
        for (i, v) in values.iter_mut().enumerate() {
            let d2 = grid
                .interior_coords(i)
                .iter()
                .zip(&center)
                .map(|(&x, &c)| (x - c) * (x - c))
                .fold(S::zero(), |a, b| a + b);
            if d2 < radius * radius {
                *v = *v + sign * mag;
            }
        }
    }
    Potential::from_field(Field::from_values(grid, values)?)
}

/// Dense symmetric matrix of `-Δ_h + V` on the interior nodes, homogeneous
/// Dirichlet boundary.
pub fn assemble_operator<S: Scalar>(grid: &Grid<S>, potential: &Potential<S>) -> Result<Mat<S>> {
    if potential.grid() != grid {
        return Err(Error::GridMismatch("potential lives on a different grid".into()));
    }
    let n = grid.n_interior();
    let mut a = Mat::<S>::zeros(n, n);
    for i in 0..n {
        let mut diag = potential.values()[i];
        for axis in 0..grid.dim() {
            let h2 = grid.spacing(axis) * grid.spacing(axis);
            diag = diag + S::lit(2.0) / h2;
            for dir in [-1i8, 1] {
                if let NodeRef::Interior(j) = grid.neighbor(i, axis, dir) {
                    a[(i, j)] = -S::one() / h2;
                }
            }
        }
        a[(i, i)] = diag;
    }
    Ok(a)
}

/// Stencil application of `-Δ_h + V` without forming the matrix.
pub fn apply_operator<S: Scalar>(
    grid: &Grid<S>,
    potential: &Potential<S>,
    field: &Field<S>,
) -> Result<Field<S>> {
    if potential.grid() != grid || field.grid() != grid {
        return Err(Error::GridMismatch("operator application across grids".into()));
    }
    let mut out = vec![S::zero(); grid.n_interior()];
    let v = field.values();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = potential.values()[i] * v[i];
        for axis in 0..grid.dim() {
            let h2 = grid.spacing(axis) * grid.spacing(axis);
            let mut lap = S::lit(2.0) * v[i];
            for dir in [-1i8, 1] {
                if let NodeRef::Interior(j) = grid.neighbor(i, axis, dir) {
                    lap = lap - v[j];
                }
            }
            acc = acc + lap / h2;
        }
        *o = acc;
    }
    Field::from_values(grid, out)
}

/// Full Dirichlet eigensystem of `-Δ_h + V`.
///
/// Eigenvalues ascend; eigenfunctions are orthonormal in the cell-volume
/// inner product with the sign fixed so each one's largest-magnitude entry
/// (first such index on ties) is positive. `psis` hold the outward normal
/// traces on the full boundary.
#[derive(Clone, Debug)]
pub struct EigenSystem<S> {
    grid: Grid<S>,
    potential: Potential<S>,
    lambdas: Vec<S>,
    phis: Vec<Field<S>>,
    psis: Vec<BoundaryData<S>>,
    clusters: Vec<Vec<usize>>,
}

impl<S: Scalar> EigenSystem<S> {
    pub fn grid(&self) -> &Grid<S> {
        &self.grid
    }

    pub fn potential(&self) -> &Potential<S> {
        &self.potential
    }

    pub fn n_modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[S] {
        &self.lambdas
    }

    pub fn lambda(&self, k: usize) -> S {
        self.lambdas[k]
    }

    pub fn mode(&self, k: usize) -> &Field<S> {
        &self.phis[k]
    }

    pub fn psi(&self, k: usize) -> &BoundaryData<S> {
        &self.psis[k]
    }

    /// Clusters of indices whose eigenvalues agree within
    /// `1e-8 · (1 + |λ|)`, ascending and contiguous.
    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Spectral coefficients `(f | φ_k)` for every mode.
    pub fn coefficients(&self, f: &Field<S>) -> Result<Vec<S>> {
        (0..self.n_modes()).map(|k| f.l2_inner(&self.phis[k], None)).collect()
    }

    /// Nodal field `Σ_k c_k φ_k`.
    pub fn synthesize(&self, coeffs: &[S]) -> Result<Field<S>> {
        if coeffs.len() > self.n_modes() {
            return Err(Error::Domain("more coefficients than modes".into()));
        }
        let mut out = Field::zeros(&self.grid);
        for (k, &c) in coeffs.iter().enumerate() {
            if c != S::zero() {
                out.add_scaled(c, &self.phis[k])?;
            }
        }
        Ok(out)
    }

    /// Largest pairwise orthonormality defect
    /// `max(|⟨φ_i, φ_j⟩ - δ_ij|)`.
    pub fn orthonormality_defect(&self) -> Result<S> {
        let mut worst = S::zero();
        for i in 0..self.n_modes() {
            for j in i..self.n_modes() {
                let g = self.phis[i].l2_inner(&self.phis[j], None)?;
                let want = if i == j { S::one() } else { S::zero() };
                worst = worst.max((g - want).abs());
            }
        }
        Ok(worst)
    }

    /// Per-mode PDE residual `‖(-Δ_h + V)φ_k - λ_k φ_k‖ / (1 + |λ_k|)`.
    pub fn eigen_residual(&self, k: usize) -> Result<S> {
        let mut r = apply_operator(&self.grid, &self.potential, &self.phis[k])?;
        r.add_scaled(-self.lambdas[k], &self.phis[k])?;
        let norm = crate::mesh::discrete_norm(&r, crate::mesh::Norm::L2, None)?;
        Ok(norm / (S::one() + self.lambdas[k].abs()))
    }
}

/// Computes the eigensystem, keeping the lowest `k_max` modes when given.
pub fn eigendecompose<S: Scalar>(
    grid: &Grid<S>,
    potential: &Potential<S>,
    k_max: Option<usize>,
) -> Result<EigenSystem<S>> {
    let a = assemble_operator(grid, potential)?;
    let (raw_lambdas, vectors) = linalg::sym_eigen(&a)?;
    let n = grid.n_interior();
    let keep = k_max.map_or(n, |k| k.min(n));
    let inv_sqrt_vol = S::one() / grid.cell_volume().sqrt();

    let mut lambdas = Vec::with_capacity(keep);
    let mut phis = Vec::with_capacity(keep);
    let mut psis = Vec::with_capacity(keep);
    for k in 0..keep {
        // faer returns unit Euclidean columns; the volume weight rescales
        // them to unit discrete L^2.
        let mut vals: Vec<S> = (0..n).map(|r| vectors[(r, k)] * inv_sqrt_vol).collect();
        // Sign convention: first entry within rounding of the maximum
        // magnitude is made positive. The tolerance keeps symmetric modes
        // (equal-magnitude lobes) deterministic across solver noise.
        let m = vals.iter().fold(S::zero(), |a, v| a.max(v.abs()));
        let tie = m * (S::one() - S::lit(1e-12));
        let lead = vals.iter().position(|v| v.abs() >= tie).unwrap_or(0);
        if vals[lead] < S::zero() {
            for v in &mut vals {
                *v = -*v;
            }
        }
        let phi = Field::from_values(grid, vals)?;
        psis.push(crate::mesh::trace_neumann(&phi, None)?);
        phis.push(phi);
        lambdas.push(raw_lambdas[k]);
    }

    let tol = S::lit(CLUSTER_REL_TOL);
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for k in 0..keep {
        match clusters.last_mut() {
            Some(c) => {
                let head = lambdas[c[0]];
                if (lambdas[k] - head).abs() <= tol * (S::one() + head.abs()) {
                    c.push(k);
                } else {
                    clusters.push(vec![k]);
                }
            }
            None => clusters.push(vec![k]),
        }
    }

    Ok(EigenSystem { grid: grid.clone(), potential: potential.clone(), lambdas, phis, psis, clusters })
}

/// Smallest eigenvalue and eigenvector of `-Δ_h + V` by shifted inverse
/// iteration on the sparse stencil. Cheap path to the ground mode when the
/// full decomposition is not needed.
pub fn ground_mode<S: Scalar>(grid: &Grid<S>, potential: &Potential<S>) -> Result<(S, Field<S>)> {
    // A shift below the spectrum keeps the iteration matrix definite:
    // lambda_min >= -max|V| on Dirichlet boxes.
    let vmax = potential.values().iter().fold(S::zero(), |a, &v| a.max(v.abs()));
    let shift = -vmax - S::one();
    let n = grid.n_interior();
    let mut trip: Vec<(usize, usize, S)> = Vec::with_capacity(5 * n);
    for i in 0..n {
        let mut diag = potential.values()[i] - shift;
        for axis in 0..grid.dim() {
            let h2 = grid.spacing(axis) * grid.spacing(axis);
            diag = diag + S::lit(2.0) / h2;
            for dir in [-1i8, 1] {
                if let NodeRef::Interior(j) = grid.neighbor(i, axis, dir) {
                    trip.push((i, j, -S::one() / h2));
                }
            }
        }
        trip.push((i, i, diag));
    }
    let mat = linalg::assemble_csc(n, &trip)?;
    let (factor, _) = linalg::SparseFactor::new(&mat)?;
    let mut w = vec![S::one(); n];
    let mut lambda = S::zero();
    for _ in 0..60 {
        let x = factor.solve(&w);
        let norm = x.iter().map(|v| *v * *v).fold(S::zero(), |a, b| a + b).sqrt();
        w = x.into_iter().map(|v| v / norm).collect();
        let aw = apply_operator(grid, potential, &Field::from_values(grid, w.clone())?)?;
        lambda = w
            .iter()
            .zip(aw.values())
            .map(|(&a, &b)| a * b)
            .fold(S::zero(), |s, t| s + t);
    }
    let inv_sqrt_vol = S::one() / grid.cell_volume().sqrt();
    let vals: Vec<S> = w.iter().map(|&v| v * inv_sqrt_vol).collect();
    Ok((lambda, Field::from_values(grid, vals)?))
}

/// Numerically estimated discrete Sobolev constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SobolevEstimate<S> {
    /// Best ratio found; a certified lower bound of the true supremum.
    pub sigma: S,
    pub is_lower_bound: bool,
}

/// Dirichlet energy `vol · wᵀ(-Δ_h)w`, the quadratic form the Sobolev and
/// admissibility estimates use.
pub fn dirichlet_energy<S: Scalar>(grid: &Grid<S>, w: &Field<S>) -> Result<S> {
    let zero = Potential::zero(grid);
    let kw = apply_operator(grid, &zero, w)?;
    w.l2_inner(&kw, None)
}

/// Estimates `σ = sup ‖w‖_∞ / ‖∇w‖_2` over discrete Dirichlet fields by
/// projected subgradient ascent from at least 20 random starts plus the
/// ground mode, each polished by an exact line of attack: for a fixed
/// active node the maximizer is a multiple of a discrete Green column, so
/// every visited active node contributes `sqrt(G_ii / vol)` exactly.
pub fn sobolev_constant<S: Scalar>(grid: &Grid<S>) -> Result<SobolevEstimate<S>> {
    let n = grid.n_interior();
    let vol = grid.cell_volume();
    let zero = Potential::zero(grid);

    let mut trip: Vec<(usize, usize, S)> = Vec::with_capacity(5 * n);
    for i in 0..n {
        let mut diag = S::zero();
        for axis in 0..grid.dim() {
            let h2 = grid.spacing(axis) * grid.spacing(axis);
            diag = diag + S::lit(2.0) / h2;
            for dir in [-1i8, 1] {
                if let NodeRef::Interior(j) = grid.neighbor(i, axis, dir) {
                    trip.push((i, j, -S::one() / h2));
                }
            }
        }
        trip.push((i, i, diag));
    }
    let k_mat = linalg::assemble_csc(n, &trip)?;
    let (factor, definite) = linalg::SparseFactor::new(&k_mat)?;
    if !definite {
        return Err(Error::Backend("Dirichlet stiffness must be positive definite".into()));
    }

    let polish = |i: usize| -> Result<S> {
        let mut e = vec![S::zero(); n];
        e[i] = S::one();
        let col = factor.solve(&e);
        Ok((col[i] / vol).sqrt())
    };

    let ratio = |w: &Field<S>| -> Result<S> {
        let sup = crate::mesh::discrete_norm(w, crate::mesh::Norm::LInf, None)?;
        let energy = dirichlet_energy(grid, w)?;
        Ok(sup / energy.sqrt())
    };

    let mut best = S::zero();
    let mut polished = std::collections::BTreeSet::new();
    let mut consider = |i: usize, best: &mut S| -> Result<()> {
        if polished.insert(i) {
            let v = polish(i)?;
            if v > *best {
                *best = v;
            }
        }
        Ok(())
    };

    let (_, phi1) = ground_mode(grid, &zero)?;
    let mut starts: Vec<Vec<S>> = vec![phi1.values().to_vec()];
    const N_STARTS: usize = 20;
    for s in 0..N_STARTS {
        let mut rng = member_rng(0x534F_424C, s as u64);
        starts.push((0..n).map(|_| S::lit(rng.random::<f64>() * 2.0 - 1.0)).collect());
    }

    for start in starts {
        let mut w = Field::from_values(grid, start)?;
        let r0 = ratio(&w)?;
        if r0 > best {
            best = r0;
        }
        for step in 0..40 {
            let (mut i_star, mut a_max) = (0usize, S::zero());
            for (i, &v) in w.values().iter().enumerate() {
                if v.abs() > a_max {
                    a_max = v.abs();
                    i_star = i;
                }
            }
            consider(i_star, &mut best)?;
            // Subgradient of the sup norm at the active node, scaled to the
            // field's magnitude so steps stay comparable across scales.
            let sgn = if w.values()[i_star] >= S::zero() { S::one() } else { -S::one() };
            let eta = S::lit(0.5 / (1.0 + step as f64)) * a_max;
            w.values_mut()[i_star] = w.values()[i_star] + eta * sgn;
            let energy = dirichlet_energy(grid, &w)?;
            if !(energy > S::zero()) {
                break;
            }
            w.scale(S::one() / energy.sqrt());
            let r = ratio(&w)?;
            if r > best {
                best = r;
            }
        }
    }

    Ok(SobolevEstimate { sigma: best, is_lower_bound: true })
}

/// Smallness certificate `2 ϑ σ² < 1` together with the potential's norm
/// standing against `ϑ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissibilityCertificate<S> {
    pub sigma: S,
    pub vartheta: S,
    /// `‖V‖_{L^{n/2}}`.
    pub norm: S,
    /// `2 ϑ σ²`; below one exactly when the coercivity margin holds.
    pub product_check: S,
    pub norm_ok: bool,
    pub coercivity_ok: bool,
    /// Both conditions together.
    pub certified: bool,
}

/// Checks `‖V‖_{n/2} ≤ ϑ` and `2 ϑ σ² < 1`. With `vartheta: None` the
/// default `ϑ = 0.45 / σ²` fixes the product at `0.9`.
pub fn check_admissible<S: Scalar>(
    potential: &Potential<S>,
    vartheta: Option<S>,
    sigma: S,
) -> Result<AdmissibilityCertificate<S>> {
    if !(sigma > S::zero()) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let vartheta = match vartheta {
        Some(v) if v > S::zero() => v,
        Some(_) => return Err(Error::Domain("vartheta must be positive".into())),
        None => S::lit(0.45) / (sigma * sigma),
    };
    let norm = potential.ln2_norm();
    let product_check = S::lit(2.0) * vartheta * sigma * sigma;
    let norm_ok = norm <= vartheta;
    let coercivity_ok = product_check < S::one();
    Ok(AdmissibilityCertificate {
        sigma,
        vartheta,
        norm,
        product_check,
        norm_ok,
        coercivity_ok,
        certified: norm_ok && coercivity_ok,
    })
}

/// Bilateral power-law envelope of the computed spectrum:
/// `c0⁻¹ k^{2/n} - c1 ≤ λ_k ≤ c0 k^{2/n} + c1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeylFit<S> {
    pub c0: S,
    pub c1: S,
    /// `2 / dim`.
    pub exponent: S,
}

impl<S: Scalar> WeylFit<S> {
    /// Verifies both inequalities for a list of ascending eigenvalues.
    pub fn verify(&self, lambdas: &[S]) -> bool {
        lambdas.iter().enumerate().all(|(idx, &l)| {
            let kq = S::from_usize(idx + 1).expect("index fits scalar").powf(self.exponent);
            kq / self.c0 - self.c1 <= l && l <= self.c0 * kq + self.c1
        })
    }
}

fn weyl_c1_for<S: Scalar>(lambdas: &[S], exponent: S, c0: S) -> S {
    let mut worst = S::neg_infinity();
    for (idx, &l) in lambdas.iter().enumerate() {
        let kq = S::from_usize(idx + 1).expect("index fits scalar").powf(exponent);
        worst = worst.max(l - c0 * kq).max(kq / c0 - l);
    }
    worst
}

/// Fits the envelope lexicographically: first the smallest admissible
/// offset `c1 > 0`, then the smallest `c0 ≥ 1` achieving it, found by
/// bisection; `c1(c0)` is nonincreasing in `c0`.
pub fn weyl_fit<S: Scalar>(sys: &EigenSystem<S>) -> Result<WeylFit<S>> {
    let lambdas = sys.lambdas();
    if lambdas.len() < 10 {
        return Err(Error::Domain(format!("need at least 10 eigenvalues, got {}", lambdas.len())));
    }
    let exponent = S::lit(2.0) / S::from_usize(sys.grid().dim()).expect("dim fits scalar");
    let floor = S::lit(1e-12);
    let rel = S::lit(1e-6);

    // As c0 grows, every upper-envelope term drops without bound and the
    // lower-envelope terms decay to -lambda_k, so inf_c0 c1(c0) equals
    // -min_k lambda_k. The offset must stay positive, hence the floor;
    // relative slack keeps the target attainable at finite c0 when the
    // infimum is only approached asymptotically (negative bottom mode).
    let lambda_min = lambdas.iter().fold(S::infinity(), |a, &l| a.min(l));
    let limit = -lambda_min;
    let target = floor.max(limit + rel * (S::one() + limit.abs()));

    let mut lo = S::one();
    if weyl_c1_for(lambdas, exponent, lo) <= target {
        return Ok(WeylFit { c0: lo, c1: weyl_c1_for(lambdas, exponent, lo).max(floor), exponent });
    }
    let mut hi = S::lit(2.0);
    while weyl_c1_for(lambdas, exponent, hi) > target {
        hi = hi * S::lit(2.0);
        if hi > S::lit(1e14) {
            return Err(Error::Domain("no finite envelope scale found".into()));
        }
    }
    for _ in 0..200 {
        let mid = (lo + hi) / S::lit(2.0);
        if weyl_c1_for(lambdas, exponent, mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= S::lit(1e-12) * hi {
            break;
        }
    }
    let c1 = weyl_c1_for(lambdas, exponent, hi).max(floor);
    Ok(WeylFit { c0: hi, c1, exponent })
}

/// Eigenvalues paired with normal traces restricted to a boundary mask.
pub fn boundary_fingerprint<S: Scalar>(
    sys: &EigenSystem<S>,
    mask: &Mask,
) -> Result<Vec<(S, BoundaryData<S>)>> {
    if mask.kind() != MaskKind::Boundary {
        return Err(Error::Mask("fingerprint mask must be boundary kind".into()));
    }
    if mask.count() == 0 {
        return Err(Error::Mask("fingerprint mask selects no nodes".into()));
    }
    (0..sys.n_modes())
        .map(|k| Ok((sys.lambda(k), sys.psi(k).restricted(mask)?)))
        .collect()
}
