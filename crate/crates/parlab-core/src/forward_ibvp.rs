//! Forward parabolic solves on the eigenbasis: interior sources through the
//! variation-of-constants convolution, boundary data through transposition,
//! plus probe generation and residual audits.
//!
//! Driving data is piecewise linear on uniform time knots. Each mode then
//! obeys a scalar ODE whose convolution integral has a closed form on every
//! knot interval, so the propagation itself is exact and the only
//! discretization error left is the interpolation of the data in time.

use crate::mesh::{discrete_norm, BoundaryData, ExtendedField, Field, Grid, Mask, MaskKind, Norm};
use crate::potential_spectral::{apply_operator, EigenSystem, Potential};
use crate::report::AuditReport;
use crate::rng::member_rng;
use crate::scalar::Scalar;
use crate::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;

fn s_of<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count fits in the scalar type")
}

/// Uniform time knots `0, dt, 2 dt, ..., dt * (count - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeKnots<S> {
    dt: S,
    count: usize,
}

impl<S: Scalar> TimeKnots<S> {
    /// `count` knots spaced `dt` apart starting at zero. The step must be
    /// positive and finite and there must be at least two knots.
    pub fn new(dt: S, count: usize) -> Result<Self> {
        if !dt.is_finite() || dt <= S::zero() {
            return Err(Error::Config(format!("time step must be positive and finite, got {dt}")));
        }
        if count < 2 {
            return Err(Error::Config(format!("need at least two time knots, got {count}")));
        }
        Ok(TimeKnots { dt, count })
    }

    /// Knots covering `[0, t_end]` with `steps` equal subintervals.
    pub fn from_span(t_end: S, steps: usize) -> Result<Self> {
        if !t_end.is_finite() || t_end <= S::zero() {
            return Err(Error::Config(format!(
                "time span must be positive and finite, got {t_end}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("need at least one time step".into()));
        }
        TimeKnots::new(t_end / s_of::<S>(steps), steps + 1)
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn t_end(&self) -> S {
        self.dt * s_of::<S>(self.count - 1)
    }

    pub fn knot(&self, i: usize) -> S {
        self.dt * s_of::<S>(i)
    }

    /// Integer ratio `m` such that `self` refines `coarse`: the spans agree
    /// and `coarse.dt = m * self.dt` within 1e-12 relative.
    pub fn refinement_ratio(&self, coarse: &TimeKnots<S>) -> Result<usize> {
        let ratio = coarse.dt / self.dt;
        let rounded = ratio.round();
        if rounded < S::one() || (ratio - rounded).abs() > S::lit(1e-12) * ratio.max(S::one()) {
            return Err(Error::Config(format!(
                "knot step {} is not an integer refinement of {}",
                self.dt, coarse.dt
            )));
        }
        let m = rounded.to_f64_lossy() as usize;
        if (coarse.count - 1) * m != self.count - 1 {
            return Err(Error::Config(format!(
                "knot spans differ: {} fine intervals vs {} coarse intervals at ratio {m}",
                self.count - 1,
                coarse.count - 1
            )));
        }
        Ok(m)
    }
}

/// Activity window for driving inputs: inputs switch on at `onset`, must be
/// silent from `guard` before `release` onward, and the experiment runs to
/// `horizon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWindow<S> {
    onset: S,
    release: S,
    guard: S,
    horizon: S,
}

impl<S: Scalar> TimeWindow<S> {
    /// Requires `0 < onset < release < horizon` and
    /// `0 < guard < release - onset`, all finite.
    pub fn new(onset: S, release: S, guard: S, horizon: S) -> Result<Self> {
        for (name, v) in [("onset", onset), ("release", release), ("guard", guard), ("horizon", horizon)]
        {
            if !v.is_finite() {
                return Err(Error::Config(format!("window {name} must be finite, got {v}")));
            }
        }
        if !(S::zero() < onset && onset < release && release < horizon) {
            return Err(Error::Config(format!(
                "window needs 0 < onset < release < horizon, got {onset}, {release}, {horizon}"
            )));
        }
        if !(S::zero() < guard && guard < release - onset) {
            return Err(Error::Config(format!(
                "window guard must lie in (0, release - onset), got {guard}"
            )));
        }
        Ok(TimeWindow { onset, release, guard, horizon })
    }

    pub fn onset(&self) -> S {
        self.onset
    }

    pub fn release(&self) -> S {
        self.release
    }

    pub fn guard(&self) -> S {
        self.guard
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    /// Last instant inputs may act: `release - guard`.
    pub fn input_end(&self) -> S {
        self.release - self.guard
    }
}

/// Interior driving term sampled on uniform knots, linear in between,
/// identically zero at every knot strictly before its onset.
#[derive(Clone, Debug)]
pub struct SourceTerm<S> {
    onset: S,
    knots: TimeKnots<S>,
    frames: Vec<Field<S>>,
}

impl<S: Scalar> SourceTerm<S> {
    /// Wraps one frame per knot. All frames must share a grid, hold finite
    /// values, and vanish at knots strictly before `onset`.
    pub fn new(onset: S, knots: TimeKnots<S>, frames: Vec<Field<S>>) -> Result<Self> {
        if !onset.is_finite() || onset < S::zero() {
            return Err(Error::Config(format!("onset must be finite and nonnegative, got {onset}")));
        }
        if frames.len() != knots.count() {
            return Err(Error::Config(format!(
                "{} source frames for {} knots",
                frames.len(),
                knots.count()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.grid() != frames[0].grid() {
                return Err(Error::GridMismatch("source frames on different grids".into()));
            }
            if f.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("source frame {i} has non-finite values")));
            }
            let t = knots.knot(i);
            if t < onset && f.values().iter().any(|v| *v != S::zero()) {
                return Err(Error::Support(format!(
                    "source frame at t = {t} is nonzero before the onset {onset}"
                )));
            }
        }
        Ok(SourceTerm { onset, knots, frames })
    }

    /// Samples `f(x, t)` at every interior node and every knot at or after
    /// `onset`; earlier frames are zero.
    pub fn from_fn(
        grid: &Grid<S>,
        knots: TimeKnots<S>,
        onset: S,
        mut f: impl FnMut(&[S], S) -> S,
    ) -> Result<Self> {
        let frames = (0..knots.count())
            .map(|i| {
                let t = knots.knot(i);
                if t < onset {
                    Field::zeros(grid)
                } else {
                    Field::from_fn(grid, |x| f(x, t))
                }
            })
            .collect();
        SourceTerm::new(onset, knots, frames)
    }

    /// The zero source on the given knots.
    pub fn zero(grid: &Grid<S>, knots: TimeKnots<S>) -> Self {
        let frames = (0..knots.count()).map(|_| Field::zeros(grid)).collect();
        SourceTerm { onset: S::zero(), knots, frames }
    }

    pub fn onset(&self) -> S {
        self.onset
    }

    pub fn knots(&self) -> &TimeKnots<S> {
        &self.knots
    }

    pub fn grid(&self) -> &Grid<S> {
        self.frames[0].grid()
    }

    pub fn frame(&self, i: usize) -> &Field<S> {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Field<S>] {
        &self.frames
    }

    /// `a * f1 + b * f2` on shared knots and grid; the combined onset is the
    /// earlier of the two.
    pub fn linear_combination(a: S, f1: &Self, b: S, f2: &Self) -> Result<Self> {
        if f1.knots != f2.knots {
            return Err(Error::Config("combining sources on different knots".into()));
        }
        let mut frames = Vec::with_capacity(f1.frames.len());
        for (u, w) in f1.frames.iter().zip(&f2.frames) {
            let mut out = u.clone();
            out.scale(a);
            out.add_scaled(b, w)?;
            frames.push(out);
        }
        SourceTerm::new(f1.onset.min(f2.onset), f1.knots, frames)
    }
}

/// Boundary driving data on a fixed mask, supported inside a closed time
/// window, piecewise linear on uniform knots.
///
/// `smoothness` advertises the in-time Holder exponent of the underlying
/// continuum input; it is carried for reporting only and never enters any
/// computation.
#[derive(Clone, Debug)]
pub struct BoundaryInput<S> {
    mask: Mask,
    knots: TimeKnots<S>,
    support: (S, S),
    smoothness: S,
    frames: Vec<BoundaryData<S>>,
}

impl<S: Scalar> BoundaryInput<S> {
    /// Wraps one boundary frame per knot. The mask must select at least one
    /// boundary node; frames must share a grid, hold finite values, vanish
    /// off the mask, and vanish at knots outside `[support.0, support.1]`.
    pub fn new(
        mask: Mask,
        knots: TimeKnots<S>,
        support: (S, S),
        smoothness: S,
        frames: Vec<BoundaryData<S>>,
    ) -> Result<Self> {
        if mask.kind() != MaskKind::Boundary {
            return Err(Error::Mask("boundary input needs a boundary mask".into()));
        }
        if mask.count() == 0 {
            return Err(Error::Mask("boundary input mask selects no nodes".into()));
        }
        let (a, b) = support;
        if !a.is_finite() || !b.is_finite() || a < S::zero() || b <= a {
            return Err(Error::Config(format!(
                "support window must satisfy 0 <= start < end, got [{a}, {b}]"
            )));
        }
        if !smoothness.is_finite() || smoothness <= S::zero() || smoothness > S::one() {
            return Err(Error::Config(format!("smoothness tag must lie in (0, 1], got {smoothness}")));
        }
        if frames.len() != knots.count() {
            return Err(Error::Config(format!(
                "{} boundary frames for {} knots",
                frames.len(),
                knots.count()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.grid() != frames[0].grid() {
                return Err(Error::GridMismatch("boundary frames on different grids".into()));
            }
            if f.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("boundary frame {i} has non-finite values")));
            }
            let t = knots.knot(i);
            let inside = t >= a && t <= b;
            for (node, v) in f.values().iter().enumerate() {
                if *v != S::zero() && !mask.contains(node) {
                    return Err(Error::Support(format!(
                        "boundary frame {i} is nonzero off the mask at node {node}"
                    )));
                }
                if *v != S::zero() && !inside {
                    return Err(Error::Support(format!(
                        "boundary frame at t = {t} is nonzero outside [{a}, {b}]"
                    )));
                }
            }
        }
        Ok(BoundaryInput { mask, knots, support, smoothness, frames })
    }

    /// Samples `f(x, t)` on the mask nodes at knots inside the support
    /// window; everything else is zero.
    pub fn from_fn(
        grid: &Grid<S>,
        mask: &Mask,
        knots: TimeKnots<S>,
        support: (S, S),
        smoothness: S,
        mut f: impl FnMut(&[S], S) -> S,
    ) -> Result<Self> {
        let mut frames = Vec::with_capacity(knots.count());
        for i in 0..knots.count() {
            let t = knots.knot(i);
            if t < support.0 || t > support.1 {
                frames.push(BoundaryData::zeros(grid));
                continue;
            }
            let mut values = vec![S::zero(); grid.n_boundary()];
            for node in mask.indices() {
                let (_, _, coords) = grid.boundary_node(node);
                values[node] = f(&coords, t);
            }
            frames.push(BoundaryData::from_values(grid, values)?);
        }
        BoundaryInput::new(mask.clone(), knots, support, smoothness, frames)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn knots(&self) -> &TimeKnots<S> {
        &self.knots
    }

    pub fn support(&self) -> (S, S) {
        self.support
    }

    pub fn smoothness(&self) -> S {
        self.smoothness
    }

    pub fn grid(&self) -> &Grid<S> {
        self.frames[0].grid()
    }

    pub fn frame(&self, i: usize) -> &BoundaryData<S> {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[BoundaryData<S>] {
        &self.frames
    }

    /// `a * p1 + b * p2` on a shared mask, knots, and support window. The
    /// combined smoothness tag is the smaller exponent.
    pub fn linear_combination(a: S, p1: &Self, b: S, p2: &Self) -> Result<Self> {
        if p1.mask != p2.mask {
            return Err(Error::Mask("combining boundary inputs on different masks".into()));
        }
        if p1.knots != p2.knots || p1.support != p2.support {
            return Err(Error::Config("combining boundary inputs on different windows".into()));
        }
        let mut frames = Vec::with_capacity(p1.frames.len());
        for (u, w) in p1.frames.iter().zip(&p2.frames) {
            let values = u
                .values()
                .iter()
                .zip(w.values())
                .map(|(x, y)| a * *x + b * *y)
                .collect();
            frames.push(BoundaryData::from_values(u.grid(), values)?);
        }
        BoundaryInput::new(
            p1.mask.clone(),
            p1.knots,
            p1.support,
            p1.smoothness.min(p2.smoothness),
            frames,
        )
    }
}

/// Boundary values attached to a trajectory, one frame per knot.
#[derive(Clone, Debug)]
pub struct BoundaryTrace<S> {
    pub mask: Mask,
    pub frames: Vec<BoundaryData<S>>,
}

/// Spectral trajectory: one coefficient per (knot, mode) over a fixed
/// eigensystem, with an optional record of the boundary trace that drove it.
///
/// The nodal frame at knot `i` is the synthesis `sum_k c_k(t_i) phi_k`.
#[derive(Clone, Debug)]
pub struct SpaceTimeField<'a, S: Scalar> {
    sys: &'a EigenSystem<S>,
    knots: TimeKnots<S>,
    coeffs: Vec<Vec<S>>,
    boundary: Option<BoundaryTrace<S>>,
}

impl<'a, S: Scalar> SpaceTimeField<'a, S> {
    /// Wraps raw coefficients: one row per knot, one entry per mode, all
    /// finite.
    pub fn new(
        sys: &'a EigenSystem<S>,
        knots: TimeKnots<S>,
        coeffs: Vec<Vec<S>>,
        boundary: Option<BoundaryTrace<S>>,
    ) -> Result<Self> {
        if coeffs.len() != knots.count() {
            return Err(Error::Config(format!(
                "{} coefficient rows for {} knots",
                coeffs.len(),
                knots.count()
            )));
        }
        for row in &coeffs {
            if row.len() != sys.n_modes() {
                return Err(Error::Config(format!(
                    "coefficient row has {} entries for {} modes",
                    row.len(),
                    sys.n_modes()
                )));
            }
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::Domain("non-finite trajectory coefficient".into()));
            }
        }
        if let Some(trace) = &boundary {
            if trace.frames.len() != knots.count() {
                return Err(Error::Config("boundary trace length differs from the knots".into()));
            }
        }
        Ok(SpaceTimeField { sys, knots, coeffs, boundary })
    }

    pub fn system(&self) -> &'a EigenSystem<S> {
        self.sys
    }

    pub fn knots(&self) -> &TimeKnots<S> {
        &self.knots
    }

    pub fn n_modes(&self) -> usize {
        self.sys.n_modes()
    }

    pub fn coefficient(&self, knot: usize, mode: usize) -> S {
        self.coeffs[knot][mode]
    }

    /// All modal coefficients at one knot.
    pub fn coefficients_at(&self, knot: usize) -> &[S] {
        &self.coeffs[knot]
    }

    /// One mode's coefficient across all knots.
    pub fn mode_series(&self, mode: usize) -> Vec<S> {
        self.coeffs.iter().map(|row| row[mode]).collect()
    }

    /// Nodal frame at knot `i`.
    pub fn frame(&self, i: usize) -> Result<Field<S>> {
        self.sys.synthesize(&self.coeffs[i])
    }

    /// Nodal frame at the last knot.
    pub fn final_frame(&self) -> Result<Field<S>> {
        self.frame(self.knots.count() - 1)
    }

    /// Boundary trace the trajectory was driven by, if any.
    pub fn boundary_trace(&self) -> Option<&BoundaryTrace<S>> {
        self.boundary.as_ref()
    }

    /// `a * u1 + b * u2` over the same eigensystem and knots. Boundary
    /// traces combine when both trajectories carry one on the same mask and
    /// are dropped otherwise.
    pub fn linear_combination(a: S, u1: &Self, b: S, u2: &Self) -> Result<Self> {
        if !std::ptr::eq(u1.sys, u2.sys) {
            return Err(Error::Config("combining trajectories over different eigensystems".into()));
        }
        if u1.knots != u2.knots {
            return Err(Error::Config("combining trajectories on different knots".into()));
        }
        let coeffs = u1
            .coeffs
            .iter()
            .zip(&u2.coeffs)
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| a * *x + b * *y).collect())
            .collect();
        let boundary = match (&u1.boundary, &u2.boundary) {
            (Some(t1), Some(t2)) if t1.mask == t2.mask => {
                let frames = t1
                    .frames
                    .iter()
                    .zip(&t2.frames)
                    .map(|(p, q)| {
                        let values =
                            p.values().iter().zip(q.values()).map(|(x, y)| a * *x + b * *y).collect();
                        BoundaryData::from_values(p.grid(), values)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(BoundaryTrace { mask: t1.mask.clone(), frames })
            }
            _ => None,
        };
        SpaceTimeField::new(u1.sys, u1.knots, coeffs, boundary)
    }

    /// CSV of the spectral coefficients, one row per (knot, mode).
    pub fn spectral_csv(&self) -> String {
        let mut out = String::from("t,mode,coefficient\n");
        for (i, row) in self.coeffs.iter().enumerate() {
            let t = self.knots.knot(i);
            for (k, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{t},{k},{c}");
            }
        }
        out
    }

    /// CSV of the nodal values, one row per (knot, interior node).
    pub fn nodal_csv(&self) -> Result<String> {
        let mut out = String::from("t,node,value\n");
        for i in 0..self.knots.count() {
            let t = self.knots.knot(i);
            let frame = self.frame(i)?;
            for (node, v) in frame.values().iter().enumerate() {
                let _ = writeln!(out, "{t},{node},{v}");
            }
        }
        Ok(out)
    }
}

/// Integration weights for one knot interval of the per-mode convolution.
///
/// For the scalar ODE `c' = -lambda c + g` with `g` linear on `[0, dt]`
/// (endpoint values `g0`, `g1`) the exact update is
/// `c(dt) = e^{-x} c(0) + dt (w0 g0 + w1 g1)` with `x = lambda dt` and
///
/// `w0 = (1 - (1 + x) e^{-x}) / x^2`, `w1 = (x - 1 + e^{-x}) / x^2`.
///
/// Below `|x| = 1/2` both weights are evaluated by their power series to
/// avoid the cancellation in the closed forms near zero; at `x = 0` they
/// reduce to the trapezoid weights `(1/2, 1/2)`.
pub fn duhamel_weights<S: Scalar>(x: S) -> (S, S) {
    if x.abs() <= S::lit(0.5) {
        // w1 = sum_{j >= 0} (-x)^j / (j + 2)! and w0 carries an extra factor
        // (j + 1) per term; 20 terms reach full precision at |x| = 1/2.
        let mut term = S::lit(0.5);
        let mut w0 = term;
        let mut w1 = term;
        for j in 1..20 {
            term = term * (-x) / s_of::<S>(j + 2);
            w1 = w1 + term;
            w0 = w0 + term * s_of::<S>(j + 1);
        }
        (w0, w1)
    } else {
        let e = (-x).exp();
        let x2 = x * x;
        ((S::one() - (S::one() + x) * e) / x2, (x - S::one() + e) / x2)
    }
}

/// Marches every mode through the knot intervals with the exact one-step
/// update, starting from zero coefficients.
pub(crate) fn integrate_modes<S: Scalar>(
    sys: &EigenSystem<S>,
    knots: TimeKnots<S>,
    modal: &[Vec<S>],
) -> Result<Vec<Vec<S>>> {
    let n = sys.n_modes();
    let dt = knots.dt();
    let mut decay = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let x = sys.lambda(k) * dt;
        decay.push((-x).exp());
        weights.push(duhamel_weights(x));
    }
    let mut coeffs: Vec<Vec<S>> = Vec::with_capacity(knots.count());
    coeffs.push(vec![S::zero(); n]);
    for i in 0..knots.count() - 1 {
        let mut next = vec![S::zero(); n];
        for k in 0..n {
            let (w0, w1) = weights[k];
            next[k] = decay[k] * coeffs[i][k] + dt * (w0 * modal[i][k] + w1 * modal[i + 1][k]);
        }
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("trajectory overflowed at knot {}", i + 1)));
        }
        coeffs.push(next);
    }
    Ok(coeffs)
}

/// Linear interpolation of per-knot rows onto a grid refined by the integer
/// factor `m`. Knots shared with the coarse grid copy their row exactly.
fn resample_rows<S: Scalar>(rows: &[Vec<S>], m: usize, fine_count: usize) -> Vec<Vec<S>> {
    let mut out = Vec::with_capacity(fine_count);
    for i in 0..fine_count {
        let q = i / m;
        let r = i % m;
        if r == 0 {
            out.push(rows[q].clone());
        } else {
            let wr = s_of::<S>(r) / s_of::<S>(m);
            let wl = s_of::<S>(m - r) / s_of::<S>(m);
            out.push(rows[q].iter().zip(&rows[q + 1]).map(|(a, b)| wl * *a + wr * *b).collect());
        }
    }
    out
}

/// Trajectory driven by an interior source from a zero initial state.
///
/// Per mode `k` the coefficient obeys `c_k' = -lambda_k c_k + (F(t) | phi_k)`
/// with the source's piecewise-linear interpolant integrated exactly on each
/// knot interval. `time_grid` must refine the source knots over the same
/// span.
pub fn solve_duhamel<'a, S: Scalar>(
    sys: &'a EigenSystem<S>,
    source: &SourceTerm<S>,
    time_grid: TimeKnots<S>,
) -> Result<SpaceTimeField<'a, S>> {
    let m = time_grid.refinement_ratio(source.knots())?;
    let mut modal = Vec::with_capacity(source.knots().count());
    for frame in source.frames() {
        modal.push(sys.coefficients(frame)?);
    }
    let modal = resample_rows(&modal, m, time_grid.count());
    let coeffs = integrate_modes(sys, time_grid, &modal)?;
    SpaceTimeField::new(sys, time_grid, coeffs, None)
}

/// Trajectory driven by boundary data through transposition.
///
/// Per mode `k` the drive is `-<probe(t) | psi_k>`, the surface-measure
/// pairing of the input with the mode's outward normal trace over the probe
/// mask; the time integration matches `solve_duhamel`. The probe's support
/// window must close by the end of `time_grid`.
pub fn solve_boundary_driven<'a, S: Scalar>(
    sys: &'a EigenSystem<S>,
    probe: &BoundaryInput<S>,
    time_grid: TimeKnots<S>,
) -> Result<SpaceTimeField<'a, S>> {
    let m = time_grid.refinement_ratio(probe.knots())?;
    if probe.support().1 > time_grid.t_end() + time_grid.dt() * S::lit(1e-9) {
        return Err(Error::Support(format!(
            "probe stays active until {} but the solve ends at {}",
            probe.support().1,
            time_grid.t_end()
        )));
    }
    let n = sys.n_modes();
    let count = probe.knots().count();
    let mut modal = vec![vec![S::zero(); n]; count];
    for (i, frame) in probe.frames().iter().enumerate() {
        for k in 0..n {
            modal[i][k] = -frame.pair(sys.psi(k), Some(probe.mask()))?;
        }
    }
    let modal = resample_rows(&modal, m, time_grid.count());
    let coeffs = integrate_modes(sys, time_grid, &modal)?;
    let frames = resample_boundary(probe.frames(), m, time_grid.count())?;
    let trace = BoundaryTrace { mask: probe.mask().clone(), frames };
    SpaceTimeField::new(sys, time_grid, coeffs, Some(trace))
}

/// Linear interpolation of boundary frames onto a refined knot grid.
fn resample_boundary<S: Scalar>(
    frames: &[BoundaryData<S>],
    m: usize,
    fine_count: usize,
) -> Result<Vec<BoundaryData<S>>> {
    let mut out = Vec::with_capacity(fine_count);
    for i in 0..fine_count {
        let q = i / m;
        let r = i % m;
        if r == 0 {
            out.push(frames[q].clone());
        } else {
            let wr = s_of::<S>(r) / s_of::<S>(m);
            let wl = s_of::<S>(m - r) / s_of::<S>(m);
            let values = frames[q]
                .values()
                .iter()
                .zip(frames[q + 1].values())
                .map(|(a, b)| wl * *a + wr * *b)
                .collect();
            out.push(BoundaryData::from_values(frames[q].grid(), values)?);
        }
    }
    Ok(out)
}

/// Applies the Dirichlet operator to a field carrying genuine boundary
/// values.
///
/// Interior nodes see the usual stencil with zero boundary neighbors; each
/// face value additionally couples to its two inward neighbors with the
/// weights `-2 / h^2` and `1 / (2 h^2)`. Those weights are the transpose of
/// the one-sided normal trace, so the discrete duality
/// `(A~ g | phi) - (g | A phi) = <trace(g) | psi(phi)>` holds exactly for
/// every interior field `phi` with `psi` its outward normal trace under the
/// surface-measure pairing.
pub fn apply_extended_operator<S: Scalar>(
    potential: &Potential<S>,
    g: &ExtendedField<S>,
) -> Result<Field<S>> {
    if g.grid() != potential.grid() {
        return Err(Error::GridMismatch("extended operator application across grids".into()));
    }
    let grid = g.grid().clone();
    let mut out = apply_operator(&grid, potential, &g.interior)?;
    let values = out.values_mut();
    for b in 0..grid.n_boundary() {
        let gb = g.boundary.values()[b];
        if gb == S::zero() {
            continue;
        }
        let (face, _, _) = grid.boundary_node(b);
        let h2 = grid.spacing(face.axis) * grid.spacing(face.axis);
        let (i1, i2) = grid.inward_neighbors(b);
        values[i1] = values[i1] - S::lit(2.0) * gb / h2;
        values[i2] = values[i2] + gb / (S::lit(2.0) * h2);
    }
    Ok(out)
}

/// Audits how well a trajectory satisfies the semi-discrete equation.
///
/// Three samples: the largest interior-knot residual of
/// `D_t u + (-lap + V) u - F` with `D_t` the central difference, the largest
/// mismatch between the trajectory's recorded boundary trace and `probe`,
/// and the norm of the initial frame. Absent inputs are treated as zero.
/// Right-hand sides carry the natural scale of each quantity, floored at
/// one when the trajectory and inputs all vanish, so fitted constants read
/// as relative sizes. Cost grows as knots x modes x nodes.
pub fn residual_report<S: Scalar>(
    u: &SpaceTimeField<'_, S>,
    potential: &Potential<S>,
    source: Option<&SourceTerm<S>>,
    probe: Option<&BoundaryInput<S>>,
) -> Result<AuditReport> {
    let knots = *u.knots();
    if knots.count() < 3 {
        return Err(Error::Config("residual audit needs at least three knots".into()));
    }
    let grid = u.system().grid();
    if potential.grid() != grid {
        return Err(Error::GridMismatch("residual potential on a different grid".into()));
    }
    let lambda_max = u.system().lambda(u.system().n_modes() - 1);

    let source_frames = match source {
        Some(f) => {
            let m = knots.refinement_ratio(f.knots())?;
            if f.grid() != grid {
                return Err(Error::GridMismatch("residual source on a different grid".into()));
            }
            let rows: Vec<Vec<S>> = f.frames().iter().map(|fr| fr.values().to_vec()).collect();
            Some(resample_rows(&rows, m, knots.count()))
        }
        None => None,
    };

    let frames: Vec<Field<S>> = (0..knots.count()).map(|i| u.frame(i)).collect::<Result<_>>()?;
    let mut sup_u = S::zero();
    for f in &frames {
        sup_u = sup_u.max(discrete_norm(f, Norm::L2, None)?);
    }
    let mut sup_f = S::zero();
    if let Some(rows) = &source_frames {
        for row in rows {
            let f = Field::from_values(grid, row.clone())?;
            sup_f = sup_f.max(discrete_norm(&f, Norm::L2, None)?);
        }
    }

    let two_dt = S::lit(2.0) * knots.dt();
    let mut worst = S::zero();
    let mut worst_knot = 1usize;
    for i in 1..knots.count() - 1 {
        let mut r = apply_operator(grid, potential, &frames[i])?;
        let vals = r.values_mut();
        let lo = frames[i - 1].values();
        let hi = frames[i + 1].values();
        for (j, v) in vals.iter_mut().enumerate() {
            *v = *v + (hi[j] - lo[j]) / two_dt;
            if let Some(rows) = &source_frames {
                *v = *v - rows[i][j];
            }
        }
        let norm = discrete_norm(&r, Norm::L2, None)?;
        if norm > worst {
            worst = norm;
            worst_knot = i;
        }
    }

    let probe_frames = match probe {
        Some(p) => {
            let m = knots.refinement_ratio(p.knots())?;
            if p.grid() != grid {
                return Err(Error::GridMismatch("residual probe on a different grid".into()));
            }
            Some(resample_boundary(p.frames(), m, knots.count())?)
        }
        None => None,
    };
    let mut trace_mismatch = S::zero();
    let mut sup_trace = S::zero();
    for i in 0..knots.count() {
        let own = u.boundary_trace().map(|t| &t.frames[i]);
        let target = probe_frames.as_ref().map(|f| &f[i]);
        let mut diff = match own {
            Some(a) => a.clone(),
            None => BoundaryData::zeros(grid),
        };
        if let Some(b) = target {
            sup_trace = sup_trace.max(b.l2_norm(None)?);
            for (v, w) in diff.values_mut().iter_mut().zip(b.values()) {
                *v = *v - *w;
            }
        }
        if let Some(a) = own {
            sup_trace = sup_trace.max(a.l2_norm(None)?);
        }
        trace_mismatch = trace_mismatch.max(diff.l2_norm(None)?);
    }

    let floor_one = |v: S| if v > S::zero() { v } else { S::one() };
    let interior_scale = floor_one((S::one() + lambda_max.abs()) * (sup_u + sup_f));
    let trace_scale = floor_one(sup_trace);
    let initial_scale = floor_one(sup_u);
    let initial_norm = discrete_norm(&frames[0], Norm::L2, None)?;

    let config = serde_json::json!({
        "knots": knots.count(),
        "dt": knots.dt().to_f64_lossy(),
        "modes": u.n_modes(),
        "has_source": source.is_some(),
        "has_probe": probe.is_some(),
    });
    let mut report = AuditReport::new("p1", config)?;
    let mut meta = BTreeMap::new();
    meta.insert("worst_knot".to_string(), worst_knot.to_string());
    report.push_with_meta(
        "interior",
        crate::logval::LogVal::from_value(worst.to_f64_lossy()),
        crate::logval::LogVal::from_value(interior_scale.to_f64_lossy()),
        meta,
    );
    report.push(
        "boundary",
        crate::logval::LogVal::from_value(trace_mismatch.to_f64_lossy()),
        crate::logval::LogVal::from_value(trace_scale.to_f64_lossy()),
    );
    report.push(
        "initial",
        crate::logval::LogVal::from_value(initial_norm.to_f64_lossy()),
        crate::logval::LogVal::from_value(initial_scale.to_f64_lossy()),
    );
    report.finalize()?;
    Ok(report)
}

/// Shapes for generated boundary probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeShape {
    /// Every mask node carries the same smooth time bump.
    Bump,
    /// One mask node, chosen by the seed, carries the bump.
    NodeImpulse,
    /// Mask nodes carry seed-drawn amplitudes and phase-shifted envelopes.
    RandomSmooth,
}

/// Piecewise-cubic bump on `[0, 1]`: smoothstep up on the first half, down
/// on the second, zero value and slope at both ends, peak one at the middle.
fn time_bump<S: Scalar>(s: S) -> S {
    if s <= S::zero() || s >= S::one() {
        return S::zero();
    }
    let u = if s <= S::lit(0.5) { S::lit(2.0) * s } else { S::lit(2.0) * (S::one() - s) };
    u * u * (S::lit(3.0) - S::lit(2.0) * u)
}

/// Deterministic boundary input on `mask`, active on the window's input
/// interval `[onset, release - guard]`, continuously differentiable in time
/// and vanishing with its first difference at both interval ends.
pub fn generate_probe<S: Scalar>(
    grid: &Grid<S>,
    mask: &Mask,
    window: &TimeWindow<S>,
    knots: TimeKnots<S>,
    shape: ProbeShape,
    seed: u64,
) -> Result<BoundaryInput<S>> {
    if mask.kind() != MaskKind::Boundary || mask.count() == 0 {
        return Err(Error::Mask("probe mask must select at least one boundary node".into()));
    }
    let a = window.onset();
    let b = window.input_end();
    let mut rng = member_rng(seed, 0);
    let mut amplitude = vec![S::zero(); grid.n_boundary()];
    let mut phase = vec![S::zero(); grid.n_boundary()];
    match shape {
        ProbeShape::Bump => {
            for node in mask.indices() {
                amplitude[node] = S::one();
            }
        }
        ProbeShape::NodeImpulse => {
            let pick = rng.random_range(0..mask.count());
            let node = mask.indices().nth(pick).expect("mask is nonempty");
            amplitude[node] = S::one();
        }
        ProbeShape::RandomSmooth => {
            for node in mask.indices() {
                amplitude[node] = S::lit(0.5 + rng.random::<f64>());
                phase[node] = S::lit(rng.random::<f64>() * std::f64::consts::TAU);
            }
        }
    }
    let mut frames = Vec::with_capacity(knots.count());
    for i in 0..knots.count() {
        let t = knots.knot(i);
        let s = (t - a) / (b - a);
        let envelope = time_bump(s);
        if envelope == S::zero() {
            frames.push(BoundaryData::zeros(grid));
            continue;
        }
        let mut values = vec![S::zero(); grid.n_boundary()];
        for node in mask.indices() {
            let wobble = match shape {
                ProbeShape::RandomSmooth => {
                    S::one()
                        + S::lit(0.25)
                            * (S::lit(std::f64::consts::TAU) * s + phase[node]).sin()
                }
                _ => S::one(),
            };
            values[node] = amplitude[node] * envelope * wobble;
        }
        frames.push(BoundaryData::from_values(grid, values)?);
    }
    BoundaryInput::new(mask.clone(), knots, (a, b), S::one(), frames)
}
