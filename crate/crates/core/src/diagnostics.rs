//! Objective, augmented Lagrangian, residuals, accuracy, and executable
//! convergence certificates.

use serde::{Deserialize, Serialize};

use crate::dataset::label_indices;
use crate::error::{Error, Result};
use crate::matrix::{frob_sq, matmul, relu, softmax_cross_entropy_loss, Matrix};
use crate::model::{HyperParams, LayerBlock, ModelState};
use crate::solvers::residual_from_product;

/// Tolerance on the per-iteration descent inequality.
pub const DESCENT_TOL: f64 = 1e-8;

/// Unweighted pieces of the objective and Lagrangian, so that both can be
/// formed for any `(rho, nu)` without another pass over the state.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub risk: f64,
    /// `sum_l ||z_l - W_l p_l - b_l 1^T||^2`
    pub fit: f64,
    /// `sum_{l<L} ||q_l - f(z_l)||^2`
    pub activation_gap: f64,
    /// `sum_{l<L} <u_l, p_{l+1} - q_l>`
    pub dual: f64,
    /// `||p_{l+1} - q_l||^2` per hidden layer.
    pub residuals: Vec<f64>,
}

impl ObjectiveParts {
    pub fn objective(&self, nu: f64) -> f64 {
        self.risk + 0.5 * nu * (self.fit + self.activation_gap)
    }

    pub fn lagrangian(&self, rho: f64, nu: f64) -> f64 {
        self.objective(nu) + self.dual + 0.5 * rho * self.residual_total()
    }

    pub fn residual_total(&self) -> f64 {
        self.residuals.iter().sum()
    }
}

/// Computes every term in one pass. `products[l]` may supply a cached
/// `W_l p_l`.
pub fn objective_parts(state: &ModelState, products: Option<&[Matrix]>) -> Result<ObjectiveParts> {
    let l_count = state.num_layers();
    let mut parts = ObjectiveParts {
        risk: 0.0,
        fit: 0.0,
        activation_gap: 0.0,
        dual: 0.0,
        residuals: Vec::with_capacity(l_count - 1),
    };
    for (l, layer) in state.layers.iter().enumerate() {
        let owned;
        let wp = match products {
            Some(ps) => &ps[l],
            None => {
                owned = matmul(&layer.w, &layer.p)?;
                &owned
            }
        };
        parts.fit += frob_sq(&residual_from_product(&layer.z, wp, &layer.b)?);
        if let (Some(q), Some(u)) = (&layer.q, &layer.u) {
            let next_p = &state.layers[l + 1].p;
            let (mut gap, mut dual, mut res) = (0.0, 0.0, 0.0);
            for i in 0..q.as_slice().len() {
                let (qi, zi) = (q.as_slice()[i], layer.z.as_slice()[i]);
                let g = qi - zi.max(0.0);
                let r = next_p.as_slice()[i] - qi;
                gap += g * g;
                dual += u.as_slice()[i] * r;
                res += r * r;
            }
            parts.activation_gap += gap;
            parts.dual += dual;
            parts.residuals.push(res);
        } else {
            parts.risk = softmax_cross_entropy_loss(&layer.z, &state.labels);
        }
    }
    Ok(parts)
}

/// `F = R(z_L; y) + (nu/2)[sum ||z - W p - b||^2 + sum ||q - f(z)||^2]`.
pub fn objective_f(state: &ModelState, hp: &HyperParams) -> Result<f64> {
    Ok(objective_parts(state, None)?.objective(hp.nu))
}

/// `F + sum <u, p_next - q> + (rho/2) ||p_next - q||^2`.
pub fn lagrangian(state: &ModelState, hp: &HyperParams) -> Result<f64> {
    Ok(objective_parts(state, None)?.lagrangian(hp.rho, hp.nu))
}

/// `||p_{l+1} - q_l||^2` for every hidden layer.
pub fn residuals(state: &ModelState) -> Result<Vec<f64>> {
    state.layers[..state.num_layers() - 1]
        .iter()
        .zip(&state.layers[1..])
        .map(|(layer, next)| crate::matrix::frob_sq_diff(&next.p, layer.q()))
        .collect()
}

/// Output pre-activations of a fresh feed-forward pass through `layers`.
pub fn predict(layers: &[LayerBlock], x: &Matrix) -> Result<Matrix> {
    let mut a = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let z = matmul(&layer.w, &a)?.add_row_bias(&layer.b)?;
        a = if l + 1 < layers.len() { relu(&z) } else { z };
    }
    Ok(a)
}

/// Fraction of columns whose arg-max prediction matches the one-hot label.
pub fn accuracy_on(layers: &[LayerBlock], x: &Matrix, labels: &Matrix) -> Result<f64> {
    let out = predict(layers, x)?;
    out.check_same_shape(labels, "accuracy")?;
    let predicted = label_indices(&argmax_one_hot(&out));
    let truth = label_indices(labels);
    let hits = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len().max(1) as f64)
}

/// Training accuracy of the state's weights on its own inputs.
pub fn accuracy(state: &ModelState) -> Result<f64> {
    accuracy_on(&state.layers, state.inputs(), &state.labels)
}

// first maximum wins
fn argmax_one_hot(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for j in 0..z.cols() {
        let mut best = 0;
        for i in 1..z.rows() {
            if z.get(i, j) > z.get(best, j) {
                best = i;
            }
        }
        out.set(best, j, 1.0);
    }
    out
}

/// `max_l ||u_l - nu (q_l - f(z_l))||_inf`.
pub fn dual_identity_gap(state: &ModelState, nu: f64) -> f64 {
    let mut worst = 0.0f64;
    for layer in &state.layers {
        if let (Some(q), Some(u)) = (&layer.q, &layer.u) {
            for i in 0..q.as_slice().len() {
                let target = nu * (q.as_slice()[i] - layer.z.as_slice()[i].max(0.0));
                worst = worst.max((u.as_slice()[i] - target).abs());
            }
        }
    }
    worst
}

/// Largest absolute entry over every block of the iterate.
pub fn max_iterate_abs(state: &ModelState) -> f64 {
    let mut m = 0.0f64;
    for layer in &state.layers {
        m = m.max(layer.w.max_abs()).max(layer.z.max_abs()).max(layer.p.max_abs());
        m = layer.b.iter().fold(m, |m, b| m.max(b.abs()));
        if let (Some(q), Some(u)) = (&layer.q, &layer.u) {
            m = m.max(q.max_abs()).max(u.max_abs());
        }
    }
    m
}

/// Constants of the sufficient-descent inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentConstants {
    pub c1: f64,
    pub c2: f64,
    pub rho_threshold: f64,
}

impl DescentConstants {
    pub fn new(hp: &HyperParams) -> Self {
        let (rho, nu, s) = (hp.rho, hp.nu, hp.lipschitz_s);
        DescentConstants {
            c1: nu / 2.0 - 2.0 * nu * nu * s * s / rho,
            c2: rho / 2.0 - 2.0 * nu * nu / rho - nu / 2.0,
            rho_threshold: (4.0 * nu * s * s).max((17f64.sqrt() + 1.0) * nu / 2.0),
        }
    }

    /// Whether `rho` is strictly above the descent threshold.
    pub fn rho_sufficient(&self, rho: f64) -> bool {
        rho > self.rho_threshold
    }
}

/// Squared changes of one iteration, per layer (index `l` is layer `l+1`),
/// together with the step coefficients certified during it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepNorms {
    /// Zero for the first layer, whose input is fixed.
    pub p: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub z: Vec<f64>,
    /// Hidden layers only.
    pub q: Vec<f64>,
    pub tau: Vec<f64>,
    pub theta: Vec<f64>,
}

/// The descent right-hand side grouped by the constant multiplying each
/// group, so it can be re-weighted for other `(rho, nu)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescentTerms {
    /// `sum_{l>=2} (tau_l/2) ||dp_l||^2`
    pub p_weighted: f64,
    /// `sum_l (theta_l/2) ||dW_l||^2`
    pub w_weighted: f64,
    pub b_sq: f64,
    pub z_hidden_sq: f64,
    pub z_output_sq: f64,
    pub q_sq: f64,
}

impl StepNorms {
    pub fn terms(&self) -> DescentTerms {
        let l_count = self.w.len();
        let weighted = |sq: &[f64], coeff: &[f64]| sq.iter().zip(coeff).map(|(s, c)| 0.5 * c * s).sum::<f64>();
        DescentTerms {
            p_weighted: weighted(&self.p[1..], &self.tau[1..]),
            w_weighted: weighted(&self.w, &self.theta),
            b_sq: self.b.iter().sum(),
            z_hidden_sq: self.z[..l_count - 1].iter().sum(),
            z_output_sq: self.z[l_count - 1],
            q_sq: self.q.iter().sum(),
        }
    }
}

impl DescentTerms {
    /// The descent lower bound for the given constants.
    pub fn quantity(&self, k: &DescentConstants, nu: f64) -> f64 {
        self.p_weighted
            + self.w_weighted
            + 0.5 * nu * self.b_sq
            + k.c1 * self.z_hidden_sq
            + 0.5 * nu * self.z_output_sq
            + k.c2 * self.q_sq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentCertificate {
    pub c1: f64,
    pub c2: f64,
    pub rho_threshold: f64,
    /// `L(k) - L(k+1)`
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl DescentCertificate {
    pub fn slack(&self) -> f64 {
        self.lhs - self.rhs
    }
}

pub fn check_descent(l_before: f64, l_after: f64, terms: &DescentTerms, hp: &HyperParams) -> DescentCertificate {
    let k = DescentConstants::new(hp);
    let lhs = l_before - l_after;
    let rhs = terms.quantity(&k, hp.nu);
    DescentCertificate {
        c1: k.c1,
        c2: k.c2,
        rho_threshold: k.rho_threshold,
        lhs,
        rhs,
        satisfied: lhs >= rhs - DESCENT_TOL,
    }
}

/// Running minimum `c_k` of the per-iteration descent quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    /// `c[k-1]` is the minimum over the first `k` iterations.
    pub c: Vec<f64>,
    /// `k * c_k`
    pub k_c: Vec<f64>,
    pub nonincreasing: bool,
}

impl RateCertificate {
    /// `k * c_k` at `k_late` strictly below its value at `k_early` (1-based).
    pub fn decreasing_between(&self, k_early: usize, k_late: usize) -> Option<bool> {
        if k_early == 0 || k_late > self.k_c.len() || k_early >= k_late {
            return None;
        }
        Some(self.k_c[k_late - 1] < self.k_c[k_early - 1])
    }
}

pub fn check_rate(quantities: &[f64]) -> Result<RateCertificate> {
    if quantities.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rate check needs at least two iterations, got {}",
            quantities.len()
        )));
    }
    let mut c = Vec::with_capacity(quantities.len());
    let mut running = f64::INFINITY;
    for &q in quantities {
        running = running.min(q);
        c.push(running);
    }
    let k_c = c.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).collect();
    let nonincreasing = c.windows(2).all(|w| w[1] <= w[0]);
    Ok(RateCertificate { c, k_c, nonincreasing })
}

/// Norms of the Lagrangian's partial gradients at the current iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub grad_p: f64,
    pub grad_w: f64,
    pub grad_b: f64,
    pub grad_q: f64,
    /// `||grad_u|| = ||p_{l+1} - q_l||`
    pub residual: f64,
    pub max: f64,
    /// `max |grad_q + (u - u_prev)|`, when a previous iterate was given.
    pub q_identity_error: Option<f64>,
    /// `max |r - (u - u_prev)/rho|`, when a previous iterate was given.
    pub u_identity_error: Option<f64>,
}

/// Gradient norms of the Lagrangian. With `previous`, also checks that the
/// q-gradient equals `-(u - u_prev)` and the u-gradient equals
/// `(u - u_prev)/rho`.
pub fn check_stationarity(state: &ModelState, previous: Option<&ModelState>, hp: &HyperParams) -> Result<StationarityReport> {
    let (rho, nu) = (hp.rho, hp.nu);
    let (mut gp, mut gw, mut gb, mut gq, mut gr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut q_err: Option<f64> = previous.map(|_| 0.0);
    let mut u_err: Option<f64> = previous.map(|_| 0.0);
    if let Some(prev) = previous {
        if prev.spec != state.spec {
            return Err(Error::InvalidArgument("previous iterate has a different architecture".into()));
        }
    }
    for (l, layer) in state.layers.iter().enumerate() {
        let r = layer.z.sub(&matmul(&layer.w, &layer.p)?)?.add_row_bias(&layer.b.iter().map(|b| -b).collect::<Vec<_>>())?;
        gw += frob_sq(&crate::matrix::matmul_nt(&r, &layer.p)?) * nu * nu;
        gb += r.row_sums().iter().map(|s| nu * nu * s * s).sum::<f64>();
        if l > 0 {
            let prev = &state.layers[l - 1];
            let mut g = crate::matrix::matmul_tn(&layer.w, &r)?.scale(-nu);
            let (q, u) = (prev.q().as_slice(), prev.u().as_slice());
            for (i, gi) in g.as_mut_slice().iter_mut().enumerate() {
                *gi += u[i] + rho * (layer.p.as_slice()[i] - q[i]);
            }
            gp += frob_sq(&g);
        }
        if let (Some(q), Some(u)) = (&layer.q, &layer.u) {
            let next_p = state.layers[l + 1].p.as_slice();
            let u_prev = previous.map(|p| p.layers[l].u());
            for i in 0..q.as_slice().len() {
                let (qi, ui) = (q.as_slice()[i], u.as_slice()[i]);
                let res = next_p[i] - qi;
                let g = nu * (qi - layer.z.as_slice()[i].max(0.0)) - ui - rho * res;
                gq += g * g;
                gr += res * res;
                if let Some(up) = u_prev {
                    let du = ui - up.as_slice()[i];
                    q_err = q_err.map(|e| e.max((g + du).abs()));
                    u_err = u_err.map(|e| e.max((res - du / rho).abs()));
                }
            }
        }
    }
    let norms = [gp.sqrt(), gw.sqrt(), gb.sqrt(), gq.sqrt(), gr.sqrt()];
    Ok(StationarityReport {
        grad_p: norms[0],
        grad_w: norms[1],
        grad_b: norms[2],
        grad_q: norms[3],
        residual: norms[4],
        max: norms.iter().cloned().fold(0.0, f64::max),
        q_identity_error: q_err,
        u_identity_error: u_err,
    })
}
