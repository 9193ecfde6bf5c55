//! Audit reports.
//!
//! Every verified inequality produces an [`AuditReport`]: the registry id of
//! the inequality, per-sample left/right sides in log space, the fitted
//! constant that would make the inequality tight, and an echo of the
//! configuration that produced the run. Reports are the only artifact format
//! the experiments share, so downstream tooling can diff runs structurally.

use crate::logval::LogVal;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Registry of audited inequalities: `(id, role)`.
///
/// The ids are opaque wire-format keys fixed by the project's artifact
/// contract; the role strings say what each audit measures.
pub const INEQUALITY_REGISTRY: &[(&str, &str)] = &[
    ("pa1", "bilateral power-law envelope of the Dirichlet spectrum"),
    ("pa2.1", "semigroup composition and growth bound"),
    ("pa3.2", "semigroup derivative bound on the right half-plane"),
    ("p1", "space-time residual of a forward parabolic solve"),
    ("thm1", "boundary-measurement separation of distinct potentials"),
    ("0.0", "observability of the final state from an interior patch"),
    ("in4", "logarithmic stability of initial-data reconstruction"),
    ("corollary", "double-logarithmic stability modulus"),
    ("s1.6", "elliptic lift of a low-frequency projection"),
    ("tl1", "two-parameter minimization bound for the stability modulus"),
    ("ca1", "interior gradient bound for perturbed-harmonic fields"),
    ("3bi", "three-ball interpolation inequality"),
    ("c1", "smallness propagation along a chain of balls"),
    ("gquc", "global quantitative unique continuation"),
];

/// Is `id` one of the known inequality ids?
pub fn registry_contains(id: &str) -> bool {
    INEQUALITY_REGISTRY.iter().any(|(k, _)| *k == id)
}

/// One audited instance of an inequality.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AuditSample {
    /// Free-form sample label (ensemble index, parameter point).
    pub label: String,
    /// Left-hand side of the inequality.
    pub lhs: LogVal<f64>,
    /// Right-hand side with the constant stripped.
    pub rhs: LogVal<f64>,
    /// Constant that makes this sample tight: `lhs / rhs`.
    pub fitted: LogVal<f64>,
    /// Auxiliary scalars worth keeping (parameter values, intermediate
    /// quantities), stringified for a stable wire format.
    pub meta: BTreeMap<String, String>,
}

/// Summary over the fitted constants of all samples.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AuditSummary {
    pub count: usize,
    pub fitted_min: LogVal<f64>,
    pub fitted_median: LogVal<f64>,
    pub fitted_max: LogVal<f64>,
}

/// A full audit of one registry inequality over an ensemble.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AuditReport {
    pub id: String,
    pub role: String,
    pub samples: Vec<AuditSample>,
    pub summary: Option<AuditSummary>,
    /// Echo of the driving configuration, for reproducibility.
    pub config: serde_json::Value,
}

impl AuditReport {
    /// Starts a report for a registered inequality id.
    pub fn new(id: &str, config: serde_json::Value) -> Result<Self> {
        let role = INEQUALITY_REGISTRY
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, r)| r.to_string())
            .ok_or_else(|| Error::Config(format!("unknown inequality id {id:?}")))?;
        Ok(AuditReport { id: id.to_string(), role, samples: Vec::new(), summary: None, config })
    }

    /// Records one sample; `fitted` is derived as `lhs / rhs`.
    pub fn push(&mut self, label: impl Into<String>, lhs: LogVal<f64>, rhs: LogVal<f64>) -> &mut AuditSample {
        self.push_with_meta(label, lhs, rhs, BTreeMap::new())
    }

    pub fn push_with_meta(
        &mut self,
        label: impl Into<String>,
        lhs: LogVal<f64>,
        rhs: LogVal<f64>,
        meta: BTreeMap<String, String>,
    ) -> &mut AuditSample {
        self.samples.push(AuditSample { label: label.into(), lhs, rhs, fitted: lhs.div(rhs), meta });
        self.samples.last_mut().expect("just pushed")
    }

    /// Fills the summary block and checks the log-space finiteness contract:
    /// zero is allowed, overflow to `+inf` or NaN is not.
    pub fn finalize(&mut self) -> Result<()> {
        for s in &self.samples {
            if !s.lhs.is_finite_ln() || !s.rhs.is_finite_ln() {
                return Err(Error::Domain(format!(
                    "audit {} sample {:?} has a non-finite log value",
                    self.id, s.label
                )));
            }
        }
        let mut fitted: Vec<LogVal<f64>> = self.samples.iter().map(|s| s.fitted).collect();
        if fitted.is_empty() {
            return Err(Error::Domain(format!("audit {} has no samples", self.id)));
        }
        fitted.sort_by(|a, b| a.ln().partial_cmp(&b.ln()).expect("no NaN after finiteness check"));
        self.summary = Some(AuditSummary {
            count: fitted.len(),
            fitted_min: fitted[0],
            fitted_median: fitted[fitted.len() / 2],
            fitted_max: fitted[fitted.len() - 1],
        });
        Ok(())
    }

    /// Largest fitted constant over the samples. Valid after `finalize`.
    pub fn fitted_max(&self) -> LogVal<f64> {
        self.summary.as_ref().expect("finalize before querying").fitted_max
    }
}

/// Serializes any value to pretty JSON with lexicographically sorted keys,
/// the crate's canonical artifact encoding (stable bytes for hashing).
pub fn to_sorted_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // Round-tripping through Value sorts object keys: the map type behind
    // serde_json::Value is a BTreeMap.
    let v = serde_json::to_value(value).map_err(|e| Error::Backend(format!("json: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Backend(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}
