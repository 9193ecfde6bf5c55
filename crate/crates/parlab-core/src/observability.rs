//! Final-state observability from an interior patch.
//!
//! This module builds the quantitative machinery that turns interior
//! measurements of a decaying field into statements about its initial state:
//! low-frequency spectral projections, weighted modal norms, doubly
//! exponential stability moduli evaluated in log space, a hyperbolic-sine
//! lift of low-frequency data to a cylinder, ensemble audits of the
//! observability inequality with its geometric time-sequence replay, and
//! regularized space-time least-squares reconstruction of initial data with
//! a logarithmic stability ledger.

use crate::forward_ibvp::TimeWindow;
use crate::linalg::svd_lsq;
use crate::logval::LogVal;
use crate::mesh::{discrete_norm, Field, Mask, MaskKind, Norm};
use crate::potential_spectral::EigenSystem;
use crate::report::AuditReport;
use crate::rng::member_rng;
use crate::scalar::{sinhc, Scalar};
use crate::{Error, Result};
use faer::Mat;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Additive margin of the spectral shift, keeping every shifted eigenvalue
/// strictly positive.
const SHIFT_MARGIN: f64 = 1e-6;

/// Interpolation exponent of the geometric time-sequence replay.
const TELESCOPE_EPSILON: f64 = 0.125;

/// Steps recorded in the geometric time-sequence replay.
const TELESCOPE_STEPS: usize = 8;

/// Weight of the final assembled constant in the replay; echoed in reports.
const TELESCOPE_ALPHA: f64 = 5.0;

/// Subintervals of the internal quadrature grid used when a reconstruction
/// ledger needs the interior functional of a supplied truth.
const LEDGER_QUAD_STEPS: usize = 64;

fn s_of<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("grid sizes fit the scalar")
}

fn f64_log<S: Scalar>(v: LogVal<S>) -> LogVal<f64> {
    LogVal::from_ln(v.ln().to_f64_lossy())
}

// ---------------------------------------------------------------------------
// Configuration.

/// Parameters of the stability moduli and the observation window.
///
/// Invariants enforced at construction: `0 < s < 1/2`, `beta > 0`,
/// `0 < rho_hat <= rho0`, `c_hat > 0`, `varsigma` in `(0, 1)`, and the
/// blow-up threshold at `rho_hat` strictly exceeds Euler's number so the
/// double-logarithmic modulus has a nonempty slow branch.
#[derive(Clone, Debug)]
pub struct StabilityConfig<S: Scalar> {
    s: S,
    beta: S,
    rho0: S,
    rho_hat: S,
    c_hat: S,
    diameter: S,
    window: TimeWindow<S>,
    varsigma: S,
    dim: usize,
    constants: BTreeMap<String, S>,
}

impl<S: Scalar> StabilityConfig<S> {
    /// Validates and stores the full parameter set.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: S,
        beta: S,
        rho0: S,
        rho_hat: S,
        c_hat: S,
        diameter: S,
        window: TimeWindow<S>,
        varsigma: S,
        dim: usize,
    ) -> Result<Self> {
        let half = S::lit(0.5);
        if !(s.is_finite() && S::zero() < s && s < half) {
            return Err(Error::Config(format!("exponent s must lie in (0, 1/2), got {s}")));
        }
        if !(beta.is_finite() && beta > S::zero()) {
            return Err(Error::Config(format!("smoothness order beta must be positive, got {beta}")));
        }
        if !(rho0.is_finite() && rho0 > S::zero()) {
            return Err(Error::Config(format!("radius bound rho0 must be positive, got {rho0}")));
        }
        if !(rho_hat.is_finite() && S::zero() < rho_hat && rho_hat <= rho0) {
            return Err(Error::Config(format!(
                "reference radius must lie in (0, rho0 = {rho0}], got {rho_hat}"
            )));
        }
        if !(c_hat.is_finite() && c_hat > S::zero()) {
            return Err(Error::Config(format!("tower coefficient must be positive, got {c_hat}")));
        }
        if !(diameter.is_finite() && diameter > S::zero()) {
            return Err(Error::Config(format!("diameter must be positive, got {diameter}")));
        }
        if !(varsigma.is_finite() && S::zero() < varsigma && varsigma < S::one()) {
            return Err(Error::Config(format!("varsigma must lie in (0, 1), got {varsigma}")));
        }
        if dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        let cfg = StabilityConfig {
            s,
            beta,
            rho0,
            rho_hat,
            c_hat,
            diameter,
            window,
            varsigma,
            dim,
            constants: BTreeMap::new(),
        };
        let funcs = stability_functions(&cfg);
        let threshold = funcs.blowup_threshold(rho_hat)?;
        if !(threshold.ln().is_finite() && threshold.ln() > S::one()) {
            return Err(Error::Config(format!(
                "blow-up threshold at the reference radius must exceed e, its log is {}",
                threshold.ln()
            )));
        }
        Ok(cfg)
    }

    /// Default calibration over a given grid and window: `s = 1/4`,
    /// `beta = 1`, `rho0 = 1`, `rho_hat = 4/5`, `c_hat = 1/20`, and the
    /// chain contraction rate `ln(16/5) / ln(18/5)`.
    pub fn defaults(grid: &crate::mesh::Grid<S>, window: TimeWindow<S>) -> Result<Self> {
        let varsigma = S::lit(16.0 / 5.0).ln() / S::lit(18.0 / 5.0).ln();
        StabilityConfig::new(
            S::lit(0.25),
            S::one(),
            S::one(),
            S::lit(0.8),
            S::lit(0.05),
            grid.diameter(),
            window,
            varsigma,
            grid.dim(),
        )
    }

    /// Adds a named pinned constant to the echoed ledger.
    pub fn with_constant(mut self, name: impl Into<String>, value: S) -> Self {
        self.constants.insert(name.into(), value);
        self
    }

    pub fn s(&self) -> S {
        self.s
    }

    pub fn beta(&self) -> S {
        self.beta
    }

    pub fn rho0(&self) -> S {
        self.rho0
    }

    pub fn rho_hat(&self) -> S {
        self.rho_hat
    }

    pub fn c_hat(&self) -> S {
        self.c_hat
    }

    pub fn diameter(&self) -> S {
        self.diameter
    }

    pub fn window(&self) -> &TimeWindow<S> {
        &self.window
    }

    pub fn varsigma(&self) -> S {
        self.varsigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constants(&self) -> &BTreeMap<String, S> {
        &self.constants
    }

    /// Echo of the configuration for report artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        let constants: BTreeMap<&str, f64> =
            self.constants.iter().map(|(k, v)| (k.as_str(), v.to_f64_lossy())).collect();
        serde_json::json!({
            "s": self.s.to_f64_lossy(),
            "beta": self.beta.to_f64_lossy(),
            "rho0": self.rho0.to_f64_lossy(),
            "rho_hat": self.rho_hat.to_f64_lossy(),
            "c_hat": self.c_hat.to_f64_lossy(),
            "diameter": self.diameter.to_f64_lossy(),
            "horizon": self.window.horizon().to_f64_lossy(),
            "varsigma": self.varsigma.to_f64_lossy(),
            "dim": self.dim,
            "constants": constants,
        })
    }
}

// ---------------------------------------------------------------------------
// Stability moduli.

/// Evaluators for the doubly exponential weight, its blow-up threshold, the
/// mixed interior norm, and the two stability moduli. All evaluations run in
/// log space; values are materialized only where representable.
#[derive(Clone, Copy, Debug)]
pub struct StabilityFunctions<S> {
    s: S,
    beta: S,
    c_hat: S,
    rho_hat: S,
    dim: usize,
}

/// Builds the modulus evaluators for a validated configuration.
pub fn stability_functions<S: Scalar>(config: &StabilityConfig<S>) -> StabilityFunctions<S> {
    StabilityFunctions {
        s: config.s,
        beta: config.beta,
        c_hat: config.c_hat,
        rho_hat: config.rho_hat,
        dim: config.dim,
    }
}

impl<S: Scalar> StabilityFunctions<S> {
    fn check_radius(&self, rho: S) -> Result<()> {
        if !(rho.is_finite() && rho > S::zero()) {
            return Err(Error::Domain(format!("radius must be positive and finite, got {rho}")));
        }
        Ok(())
    }

    /// `ln ln` of the tower weight: `c_hat * rho^{-dim}`, exact by
    /// construction.
    pub fn tower_double_log(&self, rho: S) -> Result<S> {
        self.check_radius(rho)?;
        Ok(self.c_hat * rho.powf(-s_of::<S>(self.dim)))
    }

    /// `ln` of the tower weight: `exp(c_hat * rho^{-dim})`.
    pub fn tower_log(&self, rho: S) -> Result<S> {
        let x = self.tower_double_log(rho)?.exp();
        if !x.is_finite() {
            return Err(Error::Domain(format!(
                "tower weight exceeds the log-space range at radius {rho}"
            )));
        }
        Ok(x)
    }

    /// The tower weight `exp(exp(c_hat * rho^{-dim}))` as a log-space value.
    pub fn tower(&self, rho: S) -> Result<LogVal<S>> {
        Ok(LogVal::from_ln(self.tower_log(rho)?))
    }

    /// Blow-up threshold `rho^{-s} * tower(rho)`, the branch point of the
    /// double-logarithmic modulus.
    pub fn blowup_threshold(&self, rho: S) -> Result<LogVal<S>> {
        let t = self.tower_log(rho)?;
        Ok(LogVal::from_ln(t - self.s * rho.ln()))
    }

    /// Mixed interior norm `tower(rho) * l2_patch + rho^s * h1_full` from
    /// precomputed norm values.
    pub fn mixed_norm(&self, rho: S, l2_patch: S, h1_full: S) -> Result<LogVal<S>> {
        self.check_radius(rho)?;
        for (name, v) in [("patch", l2_patch), ("gradient", h1_full)] {
            if !(v.is_finite() && v >= S::zero()) {
                return Err(Error::Domain(format!(
                    "{name} norm must be finite and nonnegative, got {v}"
                )));
            }
        }
        let heavy = self.tower(rho)?.mul(LogVal::from_value(l2_patch));
        let light = LogVal::from_value(rho.powf(self.s) * h1_full);
        Ok(heavy.add(light))
    }

    /// Double-logarithmic modulus: `(ln ln ell)^{-s}` beyond the blow-up
    /// threshold, `(tower(rho_hat) + rho_hat^s * threshold) / ell` below it.
    pub fn log_log_modulus(&self, ell: LogVal<S>) -> Result<LogVal<S>> {
        if ell.is_zero() || !ell.is_finite_ln() {
            return Err(Error::Domain("modulus argument must be positive and finite".into()));
        }
        let threshold = self.blowup_threshold(self.rho_hat)?;
        if ell.ln() > threshold.ln() {
            // Beyond the threshold the argument exceeds e, so the inner log
            // is positive.
            let lnln = ell.ln().ln();
            Ok(LogVal::from_ln(-self.s * lnln.ln()))
        } else {
            let scale = self
                .tower(self.rho_hat)?
                .add(LogVal::from_value(self.rho_hat.powf(self.s)).mul(threshold));
            Ok(scale.div(ell))
        }
    }

    /// [`Self::log_log_modulus`] for a plainly representable argument.
    pub fn log_log_modulus_value(&self, ell: S) -> Result<LogVal<S>> {
        if !(ell.is_finite() && ell > S::zero()) {
            return Err(Error::Domain(format!("modulus argument must be positive, got {ell}")));
        }
        self.log_log_modulus(LogVal::from_value(ell))
    }

    /// Single-logarithmic modulus: `r^{-1}` on `(0, 1]`, `(ln r)^{-beta}`
    /// above 1.
    pub fn log_modulus(&self, r: LogVal<S>) -> Result<LogVal<S>> {
        if r.is_zero() || !r.is_finite_ln() {
            return Err(Error::Domain("modulus argument must be positive and finite".into()));
        }
        if r.ln() <= S::zero() {
            Ok(LogVal::one().div(r))
        } else {
            Ok(LogVal::from_ln(-self.beta * r.ln().ln()))
        }
    }

    /// [`Self::log_modulus`] for a plainly representable argument.
    pub fn log_modulus_value(&self, r: S) -> Result<LogVal<S>> {
        if !(r.is_finite() && r > S::zero()) {
            return Err(Error::Domain(format!("modulus argument must be positive, got {r}")));
        }
        self.log_modulus(LogVal::from_value(r))
    }
}

// ---------------------------------------------------------------------------
// Spectral shift, projection, norms.

/// Additive shift making every eigenvalue strictly positive:
/// `max(0, -lambda_1)` plus a fixed margin.
pub fn spectral_shift<S: Scalar>(sys: &EigenSystem<S>) -> S {
    let l1 = sys.lambda(0);
    let base = if l1 < S::zero() { -l1 } else { S::zero() };
    base + S::lit(SHIFT_MARGIN)
}

/// Eigenvalues after the strict-positivity shift, in ascending order.
pub fn shifted_lambdas<S: Scalar>(sys: &EigenSystem<S>) -> Vec<S> {
    let shift = spectral_shift(sys);
    sys.lambdas().iter().map(|&l| l + shift).collect()
}

fn low_mode_indices<S: Scalar>(sys: &EigenSystem<S>, lambda: S) -> Vec<usize> {
    shifted_lambdas(sys)
        .iter()
        .enumerate()
        .filter(|(_, &lt)| lt <= lambda)
        .map(|(k, _)| k)
        .collect()
}

/// Orthogonal projection onto the modes whose shifted eigenvalue is at most
/// `lambda`.
pub fn project_low<S: Scalar>(sys: &EigenSystem<S>, f: &Field<S>, lambda: S) -> Result<Field<S>> {
    let mut coeffs = sys.coefficients(f)?;
    let shifted = shifted_lambdas(sys);
    for (k, c) in coeffs.iter_mut().enumerate() {
        if shifted[k] > lambda {
            *c = S::zero();
        }
    }
    sys.synthesize(&coeffs)
}

/// Weighted modal norms of a state: the observability norm mixing first-order
/// summability with first-order energy, the smoothness norm with weights
/// `(1 + |lambda|)^{2 beta}`, and its shifted variant with weights
/// `lambda_shifted^{2 beta}` over strictly positive shifted modes.
#[derive(Clone, Debug)]
pub struct SpectralNorms<S> {
    observability: S,
    smoothness: S,
    shifted_smoothness: S,
    coefficients: Vec<S>,
    beta: S,
}

impl<S: Scalar> SpectralNorms<S> {
    pub fn observability_norm(&self) -> S {
        self.observability
    }

    pub fn smoothness_norm(&self) -> S {
        self.smoothness
    }

    pub fn shifted_smoothness_norm(&self) -> S {
        self.shifted_smoothness
    }

    /// Modal projection coefficients underlying all three norms.
    pub fn coefficients(&self) -> &[S] {
        &self.coefficients
    }

    pub fn beta(&self) -> S {
        self.beta
    }
}

/// Computes the three weighted modal norms of `f` at smoothness order
/// `beta`.
pub fn spectral_norms<S: Scalar>(
    sys: &EigenSystem<S>,
    f: &Field<S>,
    beta: S,
) -> Result<SpectralNorms<S>> {
    if !(beta.is_finite() && beta > S::zero()) {
        return Err(Error::Config(format!("smoothness order beta must be positive, got {beta}")));
    }
    let coefficients = sys.coefficients(f)?;
    let shifted = shifted_lambdas(sys);
    let two_beta = beta + beta;
    let mut sum_abs = S::zero();
    let mut sum_sq = S::zero();
    let mut sum_smooth = S::zero();
    let mut sum_shifted = S::zero();
    for (k, &a) in coefficients.iter().enumerate() {
        let w = S::one() + sys.lambda(k).abs();
        sum_abs = sum_abs + w.sqrt() * a.abs();
        sum_sq = sum_sq + w * a * a;
        sum_smooth = sum_smooth + w.powf(two_beta) * a * a;
        if shifted[k] > S::zero() {
            sum_shifted = sum_shifted + shifted[k].powf(two_beta) * a * a;
        }
    }
    Ok(SpectralNorms {
        observability: sum_abs + sum_sq.sqrt(),
        smoothness: sum_smooth.sqrt(),
        shifted_smoothness: sum_shifted.sqrt(),
        coefficients,
        beta,
    })
}

// ---------------------------------------------------------------------------
// Two-parameter minimization.

/// Minimum of `tower(rho) * x + rho^s * y` over the radius interval, with
/// the fitted constant of the double-logarithmic bound it certifies.
#[derive(Clone, Copy, Debug)]
pub struct TradeoffMinimum<S> {
    rho_star: S,
    minimum: LogVal<S>,
    fitted: LogVal<S>,
}

impl<S: Scalar> TradeoffMinimum<S> {
    /// Minimizing radius.
    pub fn rho_star(&self) -> S {
        self.rho_star
    }

    /// Minimum value of the trade-off objective.
    pub fn minimum(&self) -> LogVal<S> {
        self.minimum
    }

    /// `minimum / (y * modulus(y / x))`, the constant making the
    /// double-logarithmic bound tight for this pair.
    pub fn fitted_constant(&self) -> LogVal<S> {
        self.fitted
    }
}

/// Minimizes `tower(rho) * x + rho^s * y` over `rho` in `(0, rho_hat)` by
/// golden-section search on `ln rho`, then fits the constant of the bound
/// `minimum <= c * y * modulus(y / x)`.
///
/// Requires `0 < x <= y`. The objective is strictly unimodal in `ln rho`:
/// its derivative is the sum of two strictly increasing terms, so the
/// golden-section bracket always contains the minimizer.
pub fn minimize_tl<S: Scalar>(
    x: S,
    y: S,
    config: &StabilityConfig<S>,
) -> Result<TradeoffMinimum<S>> {
    if !(x.is_finite() && y.is_finite() && S::zero() < x && x <= y) {
        return Err(Error::Domain(format!("minimization requires 0 < x <= y, got x={x}, y={y}")));
    }
    let funcs = stability_functions(config);
    let (ln_x, ln_y) = (x.ln(), y.ln());
    // Objective in log coordinates; radii whose tower overflows evaluate to
    // infinity and are never selected.
    let eval = |u: S| -> S {
        let rho = u.exp();
        match funcs.tower_log(rho) {
            Ok(t) => {
                let a = t + ln_x;
                let b = funcs.s * u + ln_y;
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                hi + (lo - hi).exp().ln_1p()
            }
            Err(_) => S::infinity(),
        }
    };
    let mut lo = (config.rho_hat * S::lit(1e-9)).ln();
    let mut hi = config.rho_hat.ln();
    let g = (S::lit(5.0).sqrt() - S::one()) * S::lit(0.5);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = eval(c);
    let mut fd = eval(d);
    for _ in 0..60 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = eval(d);
        }
    }
    let u_star = (lo + hi) * S::lit(0.5);
    let rho_star = u_star.exp();
    let minimum = LogVal::from_ln(eval(u_star));
    let ratio = LogVal::from_ln(ln_y - ln_x);
    let modulus = funcs.log_log_modulus(ratio)?;
    let fitted = minimum.div(LogVal::from_value(y).mul(modulus));
    Ok(TradeoffMinimum { rho_star, minimum, fitted })
}

/// Runs [`minimize_tl`] over an ensemble of `(x, y)` pairs and reports the
/// fitted constants of the double-logarithmic bound.
pub fn minimize_tl_audit<S: Scalar>(
    pairs: &[(S, S)],
    config: &StabilityConfig<S>,
) -> Result<AuditReport> {
    if pairs.is_empty() {
        return Err(Error::Config("minimization audit needs at least one pair".into()));
    }
    let mut report = AuditReport::new(
        "tl1",
        serde_json::json!({ "pairs": pairs.len(), "config": config.to_json() }),
    )?;
    let funcs = stability_functions(config);
    for (i, &(x, y)) in pairs.iter().enumerate() {
        let m = minimize_tl(x, y, config)?;
        let ratio = LogVal::from_ln(y.ln() - x.ln());
        let rhs = LogVal::from_value(y).mul(funcs.log_log_modulus(ratio)?);
        let mut meta = BTreeMap::new();
        meta.insert("rho_star".into(), format!("{:e}", m.rho_star().to_f64_lossy()));
        meta.insert("x".into(), format!("{:e}", x.to_f64_lossy()));
        meta.insert("y".into(), format!("{:e}", y.to_f64_lossy()));
        report.push_with_meta(
            format!("pair[i={i}]"),
            f64_log(m.minimum()),
            f64_log(rhs),
            meta,
        );
    }
    report.finalize()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Hyperbolic-sine lift.

/// `sinh(sqrt(lambda) * y) / sqrt(lambda)` with the `lambda = 0` limit `y`.
pub fn sinh_quotient<S: Scalar>(lambda: S, y: S) -> S {
    y * sinhc(lambda.sqrt() * y)
}

/// Low-frequency data lifted to the cylinder: slab `i` holds the nodal
/// values at height `y_nodes[i]`.
#[derive(Clone, Debug)]
pub struct CylinderLift<S> {
    y_nodes: Vec<S>,
    modes: Vec<usize>,
    n_interior: usize,
    values: Vec<S>,
}

impl<S: Scalar> CylinderLift<S> {
    pub fn y_nodes(&self) -> &[S] {
        &self.y_nodes
    }

    /// Indices of the modes included by the frequency cutoff.
    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    /// Nodal values at height `y_nodes[i]`.
    pub fn slab(&self, i: usize) -> &[S] {
        &self.values[i * self.n_interior..(i + 1) * self.n_interior]
    }
}

/// Lifts the low-frequency part of `f` to the cylinder: each included mode
/// is extended in the height coordinate by the hyperbolic-sine quotient of
/// its shifted eigenvalue.
///
/// Heights must be strictly increasing and lie in the open unit interval.
pub fn sinh_lift<S: Scalar>(
    sys: &EigenSystem<S>,
    f: &Field<S>,
    lambda: S,
    y_grid: &[S],
) -> Result<CylinderLift<S>> {
    if y_grid.is_empty() {
        return Err(Error::Domain("lift needs at least one height".into()));
    }
    for (i, &y) in y_grid.iter().enumerate() {
        if !(y.is_finite() && S::zero() < y && y < S::one()) {
            return Err(Error::Domain(format!(
                "heights must lie in the open unit interval, node {i} is {y}"
            )));
        }
        if i > 0 && !(y > y_grid[i - 1]) {
            return Err(Error::Domain("heights must be strictly increasing".into()));
        }
    }
    let coeffs = sys.coefficients(f)?;
    let shifted = shifted_lambdas(sys);
    let modes = low_mode_indices(sys, lambda);
    let n = sys.grid().n_interior();
    let mut values = vec![S::zero(); y_grid.len() * n];
    for (yi, &y) in y_grid.iter().enumerate() {
        let slab = &mut values[yi * n..(yi + 1) * n];
        for &k in &modes {
            let weight = coeffs[k] * sinh_quotient(shifted[k], y);
            for (dst, &phi) in slab.iter_mut().zip(sys.mode(k).values()) {
                *dst = *dst + weight * phi;
            }
        }
    }
    Ok(CylinderLift { y_nodes: y_grid.to_vec(), modes, n_interior: n, values })
}

// ---------------------------------------------------------------------------
// Low-mode interior control.

/// Deterministic ensemble of random low-frequency states: member `i` draws
/// uniform coefficients in `[-1, 1]` on the modes at or below the cutoff
/// from stream `i` of the master seed.
pub fn random_low_mode_ensemble<S: Scalar>(
    sys: &EigenSystem<S>,
    lambda: S,
    count: usize,
    seed: u64,
) -> Result<Vec<Field<S>>> {
    if count == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let modes = low_mode_indices(sys, lambda);
    if modes.is_empty() {
        return Err(Error::Domain(format!("no modes at or below the cutoff {lambda}")));
    }
    let mut members = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = member_rng(seed, i as u64);
        let mut coeffs = vec![S::zero(); sys.n_modes()];
        for &k in &modes {
            coeffs[k] = S::lit(rng.random::<f64>() * 2.0 - 1.0);
        }
        members.push(sys.synthesize(&coeffs)?);
    }
    Ok(members)
}

/// One observation-to-state comparison: full norm of `u` against the
/// frequency-weighted mixed norm `exp(2 sqrt(lambda)) * L_rho(u)`.
/// Returns `(lhs, rhs, fitted)`; a zero state fixes the ratio at zero.
pub fn low_mode_ratio<S: Scalar>(
    u: &Field<S>,
    lambda: S,
    omega: &Mask,
    rho: S,
    config: &StabilityConfig<S>,
) -> Result<(LogVal<S>, LogVal<S>, LogVal<S>)> {
    if !(lambda.is_finite() && lambda >= S::zero()) {
        return Err(Error::Domain(format!("frequency cutoff must be nonnegative, got {lambda}")));
    }
    let funcs = stability_functions(config);
    let full = discrete_norm(u, Norm::L2, None)?;
    let patch = discrete_norm(u, Norm::L2, Some(omega))?;
    let h1 = discrete_norm(u, Norm::H1, None)?;
    let lhs = LogVal::from_value(full);
    let two = S::lit(2.0);
    let rhs = LogVal::from_ln(two * lambda.sqrt()).mul(funcs.mixed_norm(rho, patch, h1)?);
    let fitted = if lhs.is_zero() { LogVal::zero() } else { lhs.div(rhs) };
    Ok((lhs, rhs, fitted))
}

/// Audits the low-frequency interior-control constants over a random
/// ensemble of states below the cutoff, one sample per member and radius.
pub fn low_mode_observability<S: Scalar>(
    sys: &EigenSystem<S>,
    lambda: S,
    omega: &Mask,
    rho_grid: &[S],
    config: &StabilityConfig<S>,
    ensemble: usize,
    seed: u64,
) -> Result<AuditReport> {
    if rho_grid.is_empty() {
        return Err(Error::Config("radius grid must be nonempty".into()));
    }
    let funcs = stability_functions(config);
    for &rho in rho_grid {
        if !(rho.is_finite() && S::zero() < rho && rho <= config.rho0()) {
            return Err(Error::Config(format!(
                "radii must lie in (0, rho0 = {}], got {rho}",
                config.rho0()
            )));
        }
        funcs.tower_log(rho)?;
    }
    let members = random_low_mode_ensemble(sys, lambda, ensemble, seed)?;
    type Row = Vec<(String, LogVal<f64>, LogVal<f64>, BTreeMap<String, String>)>;
    let rows: Result<Vec<Row>> = members
        .par_iter()
        .enumerate()
        .map(|(i, u)| -> Result<Row> {
            let mut out = Vec::with_capacity(rho_grid.len());
            for &rho in rho_grid {
                let (lhs, rhs, _) = low_mode_ratio(u, lambda, omega, rho, config)?;
                let mut meta = BTreeMap::new();
                meta.insert("rho".into(), format!("{:e}", rho.to_f64_lossy()));
                meta.insert("lambda".into(), format!("{:e}", lambda.to_f64_lossy()));
                out.push((
                    format!("c[member={i},rho={:e}]", rho.to_f64_lossy()),
                    f64_log(lhs),
                    f64_log(rhs),
                    meta,
                ));
            }
            Ok(out)
        })
        .collect();
    let mut report = AuditReport::new(
        "s1.6",
        serde_json::json!({
            "lambda": lambda.to_f64_lossy(),
            "rho_grid": rho_grid.iter().map(|r| r.to_f64_lossy()).collect::<Vec<_>>(),
            "ensemble": ensemble,
            "seed": seed,
            "omega_count": omega.count(),
            "config": config.to_json(),
        }),
    )?;
    for row in rows? {
        for (label, lhs, rhs, meta) in row {
            report.push_with_meta(label, lhs, rhs, meta);
        }
    }
    report.finalize()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// The interior observability functional.

/// Per-knot values of the interior functional of one state, with the
/// trapezoid value of its time integral.
#[derive(Clone, Debug)]
pub struct FunctionalCurve<S> {
    knots: Vec<S>,
    values: Vec<S>,
    log_ratios: Vec<S>,
    flags: Vec<bool>,
    l1: S,
    norm: S,
}

impl<S: Scalar> FunctionalCurve<S> {
    pub fn knots(&self) -> &[S] {
        &self.knots
    }

    /// Functional values at the knots.
    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// `ln` of the modulus argument at each knot, infinite where flagged.
    pub fn log_ratios(&self) -> &[S] {
        &self.log_ratios
    }

    /// Knots where the patch norm vanished and the functional took its
    /// limiting value zero.
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Trapezoid value of the time integral over the knots.
    pub fn l1_norm(&self) -> S {
        self.l1
    }

    /// Observability norm of the underlying state.
    pub fn observability_norm(&self) -> S {
        self.norm
    }

    /// Per-knot export: `t,value,log_ratio,flagged`.
    pub fn csv(&self) -> String {
        let mut out = String::from("t,value,log_ratio,flagged\n");
        for i in 0..self.knots.len() {
            let _ = writeln!(
                out,
                "{:e},{:e},{:e},{}",
                self.knots[i].to_f64_lossy(),
                self.values[i].to_f64_lossy(),
                self.log_ratios[i].to_f64_lossy(),
                self.flags[i]
            );
        }
        out
    }
}

/// Modal evolution of one state with the pieces the functional needs.
struct Evolution<'a, S: Scalar> {
    sys: &'a EigenSystem<S>,
    omega: &'a Mask,
    coeffs: Vec<S>,
    norm: S,
    funcs: StabilityFunctions<S>,
}

impl<'a, S: Scalar> Evolution<'a, S> {
    fn new(
        sys: &'a EigenSystem<S>,
        f: &Field<S>,
        omega: &'a Mask,
        config: &StabilityConfig<S>,
    ) -> Result<Self> {
        let norms = spectral_norms(sys, f, config.beta())?;
        Ok(Evolution {
            sys,
            omega,
            coeffs: norms.coefficients().to_vec(),
            norm: norms.observability_norm(),
            funcs: stability_functions(config),
        })
    }

    fn state_at(&self, t: S) -> Result<Field<S>> {
        let decayed: Vec<S> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, &a)| a * (-self.sys.lambda(k) * t).exp())
            .collect();
        self.sys.synthesize(&decayed)
    }

    fn full_norm_at(&self, t: S) -> Result<S> {
        discrete_norm(&self.state_at(t)?, Norm::L2, None)
    }

    /// `(functional value, ln of the modulus argument, flagged)` at time `t`.
    fn eval(&self, t: S) -> Result<(S, S, bool)> {
        let patch = discrete_norm(&self.state_at(t)?, Norm::L2, Some(self.omega))?;
        if patch == S::zero() {
            return Ok((S::zero(), S::infinity(), true));
        }
        let ln_ratio = self.norm.ln() - patch.ln();
        let modulus = self.funcs.log_log_modulus(LogVal::from_ln(ln_ratio))?;
        let value = LogVal::from_value(self.norm).mul(modulus).value().ok_or_else(|| {
            Error::Domain("functional value exceeds the representable range".into())
        })?;
        Ok((value, ln_ratio, false))
    }
}

fn check_knots<S: Scalar>(knots: &[S], horizon: S) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::Domain("time grid needs at least two knots".into()));
    }
    let slack = S::lit(1e-9) * (S::one() + horizon);
    for (i, &t) in knots.iter().enumerate() {
        if !t.is_finite() || t < S::zero() || t > horizon + slack {
            return Err(Error::Domain(format!(
                "knot {i} = {t} leaves the window [0, {horizon}]"
            )));
        }
        if i > 0 && !(t > knots[i - 1]) {
            return Err(Error::Domain("time knots must be strictly increasing".into()));
        }
    }
    Ok(())
}

fn check_knots_span<S: Scalar>(knots: &[S], horizon: S) -> Result<()> {
    check_knots(knots, horizon)?;
    let slack = S::lit(1e-9) * (S::one() + horizon);
    if knots[0].abs() > slack || (knots[knots.len() - 1] - horizon).abs() > slack {
        return Err(Error::Domain(format!(
            "time grid must span [0, {horizon}] to integrate the functional"
        )));
    }
    Ok(())
}

fn trapezoid<S: Scalar>(ts: &[S], vs: &[S]) -> S {
    let half = S::lit(0.5);
    let mut acc = S::zero();
    for i in 1..ts.len() {
        acc = acc + (ts[i] - ts[i - 1]) * (vs[i] + vs[i - 1]) * half;
    }
    acc
}

/// Evaluates the interior functional of `f` on the time grid: the
/// observability norm times the double-logarithmic modulus of the ratio of
/// that norm to the evolved patch norm.
///
/// Knots where the patch norm vanishes are flagged and take the limiting
/// value zero. The zero state is rejected.
pub fn observability_functional<S: Scalar>(
    sys: &EigenSystem<S>,
    f: &Field<S>,
    omega: &Mask,
    time_knots: &[S],
    config: &StabilityConfig<S>,
) -> Result<FunctionalCurve<S>> {
    check_knots(time_knots, config.window().horizon())?;
    if discrete_norm(f, Norm::L2, None)? == S::zero() {
        return Err(Error::Domain("the functional excludes the zero state".into()));
    }
    let evo = Evolution::new(sys, f, omega, config)?;
    let mut values = Vec::with_capacity(time_knots.len());
    let mut log_ratios = Vec::with_capacity(time_knots.len());
    let mut flags = Vec::with_capacity(time_knots.len());
    for &t in time_knots {
        let (v, r, fl) = evo.eval(t)?;
        values.push(v);
        log_ratios.push(r);
        flags.push(fl);
    }
    let l1 = trapezoid(time_knots, &values);
    Ok(FunctionalCurve {
        knots: time_knots.to_vec(),
        values,
        log_ratios,
        flags,
        l1,
        norm: evo.norm,
    })
}

// ---------------------------------------------------------------------------
// Observability audit.

/// Audits the final-state observability inequality over an ensemble: one
/// sample per member comparing the final full norm against the integrated
/// functional, plus a replay of the geometric time-sequence interpolation
/// inequality along `t_j = horizon * theta^j` with `theta = 2 sqrt(eps)`.
pub fn observability_audit<S: Scalar>(
    sys: &EigenSystem<S>,
    members: &[Field<S>],
    omega: &Mask,
    time_knots: &[S],
    config: &StabilityConfig<S>,
) -> Result<AuditReport> {
    if members.is_empty() {
        return Err(Error::Config("audit needs at least one member".into()));
    }
    let horizon = config.window().horizon();
    check_knots_span(time_knots, horizon)?;
    let eps = S::lit(TELESCOPE_EPSILON);
    let theta = S::lit(2.0) * eps.sqrt();
    type Row = Vec<(String, LogVal<f64>, LogVal<f64>, BTreeMap<String, String>)>;
    let rows: Result<Vec<Row>> = members
        .par_iter()
        .enumerate()
        .map(|(i, f)| -> Result<Row> {
            let curve = observability_functional(sys, f, omega, time_knots, config)?;
            let evo = Evolution::new(sys, f, omega, config)?;
            let mut out: Row = Vec::with_capacity(1 + TELESCOPE_STEPS);
            let lhs = evo.full_norm_at(horizon)?;
            let mut meta = BTreeMap::new();
            meta.insert("norm".into(), format!("{:e}", curve.observability_norm().to_f64_lossy()));
            out.push((
                format!("member[i={i}]"),
                LogVal::from_value(lhs.to_f64_lossy()),
                LogVal::from_value(curve.l1_norm().to_f64_lossy()),
                meta,
            ));
            let one = S::one();
            for j in 0..TELESCOPE_STEPS {
                let tj = horizon * theta.powi(j as i32);
                let tj1 = horizon * theta.powi(j as i32 + 1);
                let gap = tj - tj1;
                let (ij, _, _) = evo.eval(tj)?;
                // A vanishing functional value would zero the right side;
                // the sample is skipped rather than recorded as infinite.
                if ij == S::zero() {
                    continue;
                }
                let lhs_j = LogVal::from_value(evo.full_norm_at(tj)?);
                let rhs_j = LogVal::from_ln(one / (eps * gap))
                    .mul(LogVal::from_value(ij).powf(one - eps))
                    .mul(LogVal::from_value(evo.full_norm_at(tj1)?).powf(eps));
                let mut meta = BTreeMap::new();
                meta.insert("t".into(), format!("{:e}", tj.to_f64_lossy()));
                meta.insert("gap".into(), format!("{:e}", gap.to_f64_lossy()));
                out.push((
                    format!("step[member={i},j={j}]"),
                    f64_log(lhs_j),
                    f64_log(rhs_j),
                    meta,
                ));
            }
            Ok(out)
        })
        .collect();
    let mut report = AuditReport::new(
        "0.0",
        serde_json::json!({
            "members": members.len(),
            "knots": time_knots.len(),
            "omega_count": omega.count(),
            "epsilon": TELESCOPE_EPSILON,
            "theta": theta.to_f64_lossy(),
            "alpha": TELESCOPE_ALPHA,
            "steps": TELESCOPE_STEPS,
            "config": config.to_json(),
        }),
    )?;
    for row in rows? {
        for (label, lhs, rhs, meta) in row {
            report.push_with_meta(label, lhs, rhs, meta);
        }
    }
    report.finalize()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Initial-data reconstruction.

/// Ledger of one regularized reconstruction from patch data.
#[derive(Clone, Debug)]
pub struct RecoveryReport<S> {
    /// Mode indices below the frequency cutoff, in ascending order.
    pub modes: Vec<usize>,
    /// Recovered coefficients, aligned with `modes`.
    pub coefficients: Vec<S>,
    /// Retained singular directions of the space-time design.
    pub rank: usize,
    pub sigma_max: S,
    /// Condition number over the retained directions.
    pub condition: S,
    /// Euclidean misfit of the recovered coefficients on the data.
    pub residual: S,
    pub lambda_cutoff: S,
    pub tau: S,
    /// Full-domain error of the recovered state, when a truth is supplied.
    pub recovery_error: Option<S>,
    /// High-frequency tail bound `lambda^{-beta}` times the shifted
    /// smoothness norm of the truth.
    pub tail_bound: Option<S>,
    /// `exp(lambda * horizon)` times the integrated functional of the truth.
    pub observability_term: Option<LogVal<S>>,
    /// Constant making the stability bound tight for the truth:
    /// `max(0, |truth| - tail) / observability_term`.
    pub fitted: Option<LogVal<S>>,
}

/// Reconstructs the low-frequency initial coefficients from patch data on
/// time knots by truncated-SVD least squares over the joint space-time
/// design, then synthesizes the recovered state.
///
/// `data[i]` holds the patch values at `knots[i]`, ordered by the mask's
/// ascending node indices. Singular values at or below `tau * sigma_max`
/// are discarded. When `truth` is supplied the ledger gains the recovery
/// error, the tail bound, and the fitted stability constant.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_initial<S: Scalar>(
    sys: &EigenSystem<S>,
    omega: &Mask,
    knots: &[S],
    data: &[Vec<S>],
    lambda_cutoff: S,
    tau: S,
    config: &StabilityConfig<S>,
    truth: Option<&Field<S>>,
) -> Result<(Field<S>, RecoveryReport<S>)> {
    if omega.kind() != MaskKind::Interior || omega.is_empty() {
        return Err(Error::Mask("reconstruction needs a nonempty interior patch".into()));
    }
    if knots.is_empty() || data.is_empty() {
        return Err(Error::Domain("reconstruction needs data on at least one knot".into()));
    }
    if data.len() != knots.len() {
        return Err(Error::Config(format!(
            "got {} data rows for {} knots",
            data.len(),
            knots.len()
        )));
    }
    for (i, &t) in knots.iter().enumerate() {
        if !t.is_finite() || t < S::zero() {
            return Err(Error::Domain(format!("knot {i} = {t} precedes the start")));
        }
        if i > 0 && !(t > knots[i - 1]) {
            return Err(Error::Domain("time knots must be strictly increasing".into()));
        }
    }
    if !(tau.is_finite() && S::zero() <= tau && tau < S::one()) {
        return Err(Error::Config(format!("truncation level must lie in [0, 1), got {tau}")));
    }
    let nodes: Vec<usize> = omega.indices().collect();
    for (i, row) in data.iter().enumerate() {
        if row.len() != nodes.len() {
            return Err(Error::Config(format!(
                "data row {i} has {} entries for a patch of {} nodes",
                row.len(),
                nodes.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("data row {i} contains non-finite entries")));
        }
    }
    let modes = low_mode_indices(sys, lambda_cutoff);
    if modes.is_empty() {
        return Err(Error::Domain(format!("no modes at or below the cutoff {lambda_cutoff}")));
    }
    let n_rows = knots.len() * nodes.len();
    let mut a = Mat::<S>::zeros(n_rows, modes.len());
    let mut b = vec![S::zero(); n_rows];
    for (ti, &t) in knots.iter().enumerate() {
        for (ri, &node) in nodes.iter().enumerate() {
            let row = ti * nodes.len() + ri;
            b[row] = data[ti][ri];
            for (ci, &k) in modes.iter().enumerate() {
                a[(row, ci)] = (-sys.lambda(k) * t).exp() * sys.mode(k).values()[node];
            }
        }
    }
    let lsq = svd_lsq(&a, &b, tau)?;
    let mut full = vec![S::zero(); sys.n_modes()];
    for (ci, &k) in modes.iter().enumerate() {
        full[k] = lsq.solution[ci];
    }
    let recovered = sys.synthesize(&full)?;
    let mut residual = S::zero();
    for row in 0..n_rows {
        let mut ax = S::zero();
        for ci in 0..modes.len() {
            ax = ax + a[(row, ci)] * lsq.solution[ci];
        }
        residual = residual + (ax - b[row]) * (ax - b[row]);
    }
    let residual = residual.sqrt();

    let mut recovery_error = None;
    let mut tail_bound = None;
    let mut observability_term = None;
    let mut fitted = None;
    if let Some(truth) = truth {
        truth.check_same_grid(&recovered)?;
        let mut diff = recovered.clone();
        diff.add_scaled(-S::one(), truth)?;
        recovery_error = Some(discrete_norm(&diff, Norm::L2, None)?);
        let norms = spectral_norms(sys, truth, config.beta())?;
        let tail = lambda_cutoff.powf(-config.beta()) * norms.shifted_smoothness_norm();
        tail_bound = Some(tail);
        let horizon = config.window().horizon();
        let steps = LEDGER_QUAD_STEPS;
        let ts: Vec<S> = (0..=steps).map(|i| horizon * s_of::<S>(i) / s_of::<S>(steps)).collect();
        let curve = observability_functional(sys, truth, omega, &ts, config)?;
        let term = LogVal::from_ln(lambda_cutoff * horizon)
            .mul(LogVal::from_value(curve.l1_norm()));
        observability_term = Some(term);
        let full_norm = discrete_norm(truth, Norm::L2, None)?;
        let excess = full_norm - tail;
        let numerator =
            if excess > S::zero() { LogVal::from_value(excess) } else { LogVal::zero() };
        fitted = Some(numerator.div(term));
    }
    let report = RecoveryReport {
        modes,
        coefficients: lsq.solution,
        rank: lsq.rank,
        sigma_max: lsq.sigma_max,
        condition: lsq.condition,
        residual,
        lambda_cutoff,
        tau,
        recovery_error,
        tail_bound,
        observability_term,
        fitted,
    };
    Ok((recovered, report))
}

// ---------------------------------------------------------------------------
// Stability audits.

/// Audits the two stability inequalities over an ensemble with known
/// truths. The first report checks, per member and frequency cutoff, that
/// the full norm minus the tail bound is controlled by
/// `exp(lambda * horizon)` times the integrated functional. The second
/// checks the single-logarithmic form: full norm against the log modulus of
/// the smoothness-to-functional ratio times the smoothness norm.
pub fn stability_audit<S: Scalar>(
    sys: &EigenSystem<S>,
    members: &[Field<S>],
    omega: &Mask,
    lambda_grid: &[S],
    time_knots: &[S],
    config: &StabilityConfig<S>,
) -> Result<(AuditReport, AuditReport)> {
    if members.is_empty() {
        return Err(Error::Config("audit needs at least one member".into()));
    }
    if lambda_grid.is_empty() {
        return Err(Error::Config("frequency grid must be nonempty".into()));
    }
    for &l in lambda_grid {
        if !(l.is_finite() && l > S::zero()) {
            return Err(Error::Config(format!("frequency cutoffs must be positive, got {l}")));
        }
    }
    let horizon = config.window().horizon();
    check_knots_span(time_knots, horizon)?;
    let funcs = stability_functions(config);
    struct MemberData<S> {
        full: S,
        l1: S,
        smoothness: S,
        shifted_smoothness: S,
    }
    let per_member: Result<Vec<MemberData<S>>> = members
        .par_iter()
        .map(|f| -> Result<MemberData<S>> {
            let curve = observability_functional(sys, f, omega, time_knots, config)?;
            let norms = spectral_norms(sys, f, config.beta())?;
            Ok(MemberData {
                full: discrete_norm(f, Norm::L2, None)?,
                l1: curve.l1_norm(),
                smoothness: norms.smoothness_norm(),
                shifted_smoothness: norms.shifted_smoothness_norm(),
            })
        })
        .collect();
    let per_member = per_member?;

    let echo = serde_json::json!({
        "members": members.len(),
        "lambda_grid": lambda_grid.iter().map(|l| l.to_f64_lossy()).collect::<Vec<_>>(),
        "knots": time_knots.len(),
        "omega_count": omega.count(),
        "config": config.to_json(),
    });
    let mut tail_report = AuditReport::new("in4", echo.clone())?;
    let beta = config.beta();
    for (i, md) in per_member.iter().enumerate() {
        for &lambda in lambda_grid {
            let tail = lambda.powf(-beta) * md.shifted_smoothness;
            let excess = md.full - tail;
            let lhs = if excess > S::zero() { LogVal::from_value(excess) } else { LogVal::zero() };
            let rhs = LogVal::from_ln(lambda * horizon).mul(LogVal::from_value(md.l1));
            let mut meta = BTreeMap::new();
            meta.insert("lambda".into(), format!("{:e}", lambda.to_f64_lossy()));
            meta.insert("norm".into(), format!("{:e}", md.full.to_f64_lossy()));
            meta.insert("tail".into(), format!("{:e}", tail.to_f64_lossy()));
            meta.insert("tail_dominates".into(), format!("{}", excess <= S::zero()));
            tail_report.push_with_meta(
                format!("member[i={i},lambda={:e}]", lambda.to_f64_lossy()),
                f64_log(lhs),
                f64_log(rhs),
                meta,
            );
        }
    }
    tail_report.finalize()?;

    let mut modulus_report = AuditReport::new("corollary", echo)?;
    for (i, md) in per_member.iter().enumerate() {
        let ratio = LogVal::from_value(md.smoothness).div(LogVal::from_value(md.l1));
        let psi = funcs.log_modulus(ratio)?;
        let rhs = psi.mul(LogVal::from_value(md.smoothness));
        let mut meta = BTreeMap::new();
        meta.insert("smoothness".into(), format!("{:e}", md.smoothness.to_f64_lossy()));
        meta.insert("l1".into(), format!("{:e}", md.l1.to_f64_lossy()));
        meta.insert("ratio_ln".into(), format!("{:e}", ratio.ln().to_f64_lossy()));
        modulus_report.push_with_meta(
            format!("member[i={i}]"),
            LogVal::from_value(md.full.to_f64_lossy()),
            f64_log(rhs),
            meta,
        );
    }
    modulus_report.finalize()?;
    Ok((tail_report, modulus_report))
}
