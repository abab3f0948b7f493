//! Replays the convergence certificates over a recorded run.

use serde::Serialize;

use crate::diagnostics::{check_rate, DescentConstants, DESCENT_TOL};
use crate::model::HyperParams;
use crate::trainer::IterationMetrics;

/// Largest admissible `|u - nu (q - f(z))|`.
pub const DUAL_IDENTITY_TOL: f64 = 1e-8;
/// Largest admissible error of the gradient identities.
pub const GRADIENT_IDENTITY_TOL: f64 = 1e-10;
/// Iterate norm cap on desk-scale runs.
pub const ITERATE_CAP: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// `None` when the run does not contain what the check needs.
    pub passed: Option<bool>,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: Option<bool>, detail: String) -> Self {
        Check { name, passed, detail }
    }

    pub fn status(&self) -> &'static str {
        match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<Check>,
    pub rho_above_threshold: bool,
}

impl AuditReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed != Some(false))
    }
}

/// Audits `records` (epoch 0 first) against the certificates for `hp`.
/// Pairs that straddle a growth step are excluded from the descent checks.
pub fn audit(records: &[IterationMetrics], hp: &HyperParams) -> AuditReport {
    let constants = DescentConstants::new(hp);
    let mut checks = Vec::new();

    let mut worst_slack = f64::INFINITY;
    let mut worst_step = f64::NEG_INFINITY;
    let mut first_bad = None;
    let mut pairs = 0;
    let mut quantities = Vec::new();
    for pair in records.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let Some(terms) = cur.descent_terms else { continue };
        let rhs = terms.quantity(&constants, hp.nu);
        quantities.push(rhs);
        if cur.grew {
            continue;
        }
        pairs += 1;
        let lhs = prev.lagrangian - cur.lagrangian;
        worst_slack = worst_slack.min(lhs - rhs);
        worst_step = worst_step.max(cur.lagrangian - prev.lagrangian);
        if lhs < rhs - DESCENT_TOL && first_bad.is_none() {
            first_bad = Some(cur.epoch);
        }
    }
    let have_pairs = (pairs > 0).then_some(());
    checks.push(Check::new(
        "lagrangian_nonincreasing",
        have_pairs.map(|_| worst_step <= DESCENT_TOL),
        format!("largest increase {worst_step:.3e} over {pairs} steps"),
    ));
    checks.push(Check::new(
        "sufficient_descent",
        have_pairs.map(|_| first_bad.is_none()),
        match first_bad {
            Some(epoch) => format!("violated first at epoch {epoch}; worst slack {worst_slack:.3e}"),
            None => format!("worst slack {worst_slack:.3e} (C1 = {:.4e}, C2 = {:.4e})", constants.c1, constants.c2),
        },
    ));

    match check_rate(&quantities) {
        Ok(rate) => {
            let k_late = rate.k_c.len();
            let trend = if k_late >= 20 { rate.decreasing_between(10, k_late) } else { None };
            checks.push(Check::new(
                "rate_running_minimum",
                Some(rate.nonincreasing && rate.c.iter().all(|&c| c >= 0.0 || !constants.rho_sufficient(hp.rho))),
                format!("c_k at k = {k_late}: {:.3e}", rate.c[k_late - 1]),
            ));
            checks.push(Check::new(
                "rate_k_c_k_decreasing",
                trend,
                match trend {
                    Some(_) => format!(
                        "k c_k: {:.3e} at k = 10, {:.3e} at k = {k_late}",
                        rate.k_c[9],
                        rate.k_c[k_late - 1]
                    ),
                    None => format!("needs at least 20 iterations, have {k_late}"),
                },
            ));
        }
        Err(e) => {
            checks.push(Check::new("rate_running_minimum", None, e.to_string()));
            checks.push(Check::new("rate_k_c_k_decreasing", None, e.to_string()));
        }
    }

    let worst_dual = records.iter().map(|r| r.dual_identity_gap).fold(0.0, f64::max);
    checks.push(Check::new(
        "dual_identity",
        (!records.is_empty()).then_some(worst_dual <= DUAL_IDENTITY_TOL),
        format!("max |u - nu(q - f(z))| = {worst_dual:.3e}"),
    ));

    let worst_norm = records.iter().map(|r| r.max_iterate_abs).fold(0.0, f64::max);
    let finite = records.iter().all(|r| r.lagrangian.is_finite() && r.f.is_finite());
    checks.push(Check::new(
        "bounded_iterates",
        (!records.is_empty()).then_some(finite && worst_norm <= ITERATE_CAP),
        format!("max |entry| = {worst_norm:.3e}"),
    ));

    let identities: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.grew)
        .filter_map(|r| r.stationarity)
        .filter_map(|s| Some((s.q_identity_error?, s.u_identity_error?)))
        .collect();
    let (q_err, u_err) = identities
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), &(q, u)| (a.max(q), b.max(u)));
    checks.push(Check::new(
        "gradient_identities",
        (!identities.is_empty()).then_some(q_err <= GRADIENT_IDENTITY_TOL && u_err <= GRADIENT_IDENTITY_TOL),
        if identities.is_empty() {
            "no stationarity records (train with certificates enabled)".to_string()
        } else {
            format!("q-gradient {q_err:.3e}, u-gradient {u_err:.3e} over {} records", identities.len())
        },
    ));

    AuditReport {
        checks,
        rho_above_threshold: constants.rho_sufficient(hp.rho),
    }
}
