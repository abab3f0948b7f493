//! Per-layer subproblem solvers.
//!
//! Every update here is a pure function of one layer's variables and the
//! previous iterate of its neighbours, which is what lets the trainer run all
//! layers of a phase concurrently.
//!
//! The coupling term for layer `l > 1` is
//!
//! ```text
//! phi = (nu/2) ||z - W p - b 1^T||^2 + <u_prev, p - q_prev> + (rho/2) ||p - q_prev||^2
//! ```
//!
//! and the first layer keeps only the quadratic fit term. `p` and `W` are
//! updated by a prox-linear step whose curvature is found by backtracking
//! until the quadratic surrogate majorizes `phi` at the new point.

use crate::error::{Error, Result};
use crate::matrix::{
    frob_sq, inner, matmul, matmul_nt, matmul_tn, softmax_cross_entropy_loss,
    softmax_cross_entropy_unchecked, Matrix,
};
use crate::model::HyperParams;

/// Step coefficients beyond this mean the iterate has blown up.
pub const MAX_STEP_COEFF: f64 = 1e12;

/// The previous layer's output copy and dual.
#[derive(Clone, Copy, Debug)]
pub struct Coupling<'a> {
    pub q_prev: &'a Matrix,
    pub u_prev: &'a Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct PhiContext<'a> {
    pub nu: f64,
    pub rho: f64,
    pub z: &'a Matrix,
    pub w: &'a Matrix,
    pub p: &'a Matrix,
    pub b: &'a [f64],
    /// `None` on the first layer.
    pub coupling: Option<Coupling<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiVar {
    P,
    W,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktrackResult {
    pub new_point: Matrix,
    /// The certified curvature (`tau` for p, `theta` for W).
    pub step_coeff: f64,
    /// `phi(new) - U(new)`; non-positive when certified.
    pub surrogate_gap: f64,
    /// Seed for the next iteration's search.
    pub next_seed: f64,
}

impl<'a> PhiContext<'a> {
    pub fn validate(&self) -> Result<()> {
        let (n_out, n_in) = self.w.shape();
        let n = self.z.cols();
        let mismatch = |op, left, right| Err(Error::ShapeMismatch { op, left, right });
        if self.p.shape() != (n_in, n) {
            return mismatch("phi: W vs p", self.w.shape(), self.p.shape());
        }
        if self.z.rows() != n_out {
            return mismatch("phi: W vs z", self.w.shape(), self.z.shape());
        }
        if self.b.len() != n_out {
            return mismatch("phi: b vs z", (self.b.len(), 1), self.z.shape());
        }
        if let Some(c) = self.coupling {
            if c.q_prev.shape() != self.p.shape() {
                return mismatch("phi: q_prev vs p", c.q_prev.shape(), self.p.shape());
            }
            if c.u_prev.shape() != self.p.shape() {
                return mismatch("phi: u_prev vs p", c.u_prev.shape(), self.p.shape());
            }
        }
        Ok(())
    }

    /// `z - W p - b 1^T`.
    pub fn linear_residual(&self) -> Result<Matrix> {
        let wp = matmul(self.w, self.p)?;
        residual_from_product(self.z, &wp, self.b)
    }

    /// `<u_prev, p - q_prev> + (rho/2) ||p - q_prev||^2`, zero on the first layer.
    fn coupling_value(&self) -> f64 {
        match self.coupling {
            None => 0.0,
            Some(c) => {
                let (p, q, u) = (self.p.as_slice(), c.q_prev.as_slice(), c.u_prev.as_slice());
                let (mut dual, mut sq) = (0.0, 0.0);
                for i in 0..p.len() {
                    let d = p[i] - q[i];
                    dual += u[i] * d;
                    sq += d * d;
                }
                dual + 0.5 * self.rho * sq
            }
        }
    }
}

/// `z - wp - b 1^T` given a precomputed `wp = W p`.
pub fn residual_from_product(z: &Matrix, wp: &Matrix, b: &[f64]) -> Result<Matrix> {
    z.check_same_shape(wp, "residual")?;
    let mut r = z.sub(wp)?;
    let n = r.cols();
    for (i, &bi) in b.iter().enumerate() {
        for x in &mut r.as_mut_slice()[i * n..(i + 1) * n] {
            *x -= bi;
        }
    }
    Ok(r)
}

pub fn eval_phi(ctx: &PhiContext<'_>) -> Result<f64> {
    ctx.validate()?;
    let r = ctx.linear_residual()?;
    Ok(0.5 * ctx.nu * frob_sq(&r) + ctx.coupling_value())
}

/// Gradient of `phi` with respect to `p`, `W`, or `b` (returned as `n x 1`).
pub fn grad_phi(ctx: &PhiContext<'_>, wrt: PhiVar) -> Result<Matrix> {
    ctx.validate()?;
    let r = ctx.linear_residual()?;
    grad_from_residual(ctx, &r, wrt)
}

fn grad_from_residual(ctx: &PhiContext<'_>, r: &Matrix, wrt: PhiVar) -> Result<Matrix> {
    match wrt {
        PhiVar::P => {
            let c = ctx.coupling.ok_or_else(|| {
                Error::InvalidArgument("the first layer's input is the data and has no p-gradient".into())
            })?;
            let mut g = matmul_tn(ctx.w, r)?.scale(-ctx.nu);
            let (gs, p, q, u) = (g.as_mut_slice(), ctx.p.as_slice(), c.q_prev.as_slice(), c.u_prev.as_slice());
            for i in 0..gs.len() {
                gs[i] += u[i] + ctx.rho * (p[i] - q[i]);
            }
            Ok(g)
        }
        PhiVar::W => Ok(matmul_nt(r, ctx.p)?.scale(-ctx.nu)),
        PhiVar::B => Ok(Matrix::column(
            &r.row_sums().into_iter().map(|s| -ctx.nu * s).collect::<Vec<_>>(),
        )),
    }
}

/// Grows `seed` by `backtrack_growth` until the quadratic surrogate with
/// that coefficient majorizes phi at `x - g/step`.
///
/// Along the step phi is an exact quadratic, so its change is
/// `-|g|^2/step + curvature/(2 step^2)` with `curvature = g^T H g`. Using the
/// expansion instead of two evaluations of phi keeps the comparison free of
/// cancellation when the decrease is far below the size of phi itself.
fn backtrack(grad_sq: f64, curvature: f64, seed: f64, hp: &HyperParams) -> Result<(f64, f64)> {
    if !(grad_sq.is_finite() && curvature.is_finite()) {
        return Err(Error::NonFinite("gradient during backtracking".into()));
    }
    let mut step = seed;
    loop {
        let inv = 1.0 / step;
        let change = -grad_sq * inv + 0.5 * curvature * inv * inv;
        let surrogate_change = -0.5 * grad_sq * inv;
        if change <= surrogate_change {
            return Ok((step, change - surrogate_change));
        }
        step *= hp.backtrack_growth;
        if step > MAX_STEP_COEFF {
            return Err(Error::BacktrackFailed { layer: 0, coeff: step });
        }
    }
}

/// Prox-linear update of a hidden layer's input copy `p`.
pub fn update_p(ctx: &PhiContext<'_>, tau_seed: f64, hp: &HyperParams) -> Result<BacktrackResult> {
    ctx.validate()?;
    if ctx.coupling.is_none() {
        return Err(Error::InvalidArgument("p is only updated for layers after the first".into()));
    }
    let r = ctx.linear_residual()?;
    let g = grad_from_residual(ctx, &r, PhiVar::P)?;
    let grad_sq = frob_sq(&g);
    // H = nu W^T W + rho I
    let curvature = ctx.nu * frob_sq(&matmul(ctx.w, &g)?) + ctx.rho * grad_sq;
    let (step, gap) = backtrack(grad_sq, curvature, tau_seed, hp)?;
    let mut new_point = ctx.p.clone();
    new_point.axpy(-1.0 / step, &g)?;
    Ok(BacktrackResult {
        new_point,
        step_coeff: step,
        surrogate_gap: gap,
        next_seed: step * hp.backtrack_shrink,
    })
}

/// Prox-linear update of `W`.
pub fn update_w(ctx: &PhiContext<'_>, theta_seed: f64, hp: &HyperParams) -> Result<BacktrackResult> {
    ctx.validate()?;
    let r = ctx.linear_residual()?;
    let g = grad_from_residual(ctx, &r, PhiVar::W)?;
    let grad_sq = frob_sq(&g);
    let curvature = ctx.nu * frob_sq(&matmul(&g, ctx.p)?);
    let (step, gap) = backtrack(grad_sq, curvature, theta_seed, hp)?;
    let mut new_point = ctx.w.clone();
    new_point.axpy(-1.0 / step, &g)?;
    Ok(BacktrackResult {
        new_point,
        step_coeff: step,
        surrogate_gap: gap,
        next_seed: step * hp.backtrack_shrink,
    })
}

/// Exact minimizer of the bias subproblem: the per-row sample mean of
/// `z - W p`. With a single sample this is the prox-linear step with
/// coefficient `nu`.
pub fn update_b(ctx: &PhiContext<'_>) -> Result<Vec<f64>> {
    ctx.validate()?;
    let wp = matmul(ctx.w, ctx.p)?;
    bias_from_product(ctx.z, &wp)
}

/// Row means of `z - wp`.
pub fn bias_from_product(z: &Matrix, wp: &Matrix) -> Result<Vec<f64>> {
    let d = z.sub(wp)?;
    let n = d.cols() as f64;
    Ok(d.row_sums().into_iter().map(|s| s / n).collect())
}

/// `(z - a)^2 + (q - max(z, 0))^2 + (z - z_prev)^2`, i.e. the scalar z
/// objective divided by `nu/2`.
#[inline]
pub fn relu_z_objective(z: f64, a: f64, z_prev: f64, q: f64) -> f64 {
    let f = z.max(0.0);
    (z - a) * (z - a) + (q - f) * (q - f) + (z - z_prev) * (z - z_prev)
}

/// Global minimizer of [`relu_z_objective`]: the best point of the `z <= 0`
/// branch is compared with the best point of the `z >= 0` branch; ties go to
/// the non-negative branch.
#[inline]
pub fn relu_z_entry(a: f64, z_prev: f64, q: f64) -> f64 {
    let neg = ((a + z_prev) / 2.0).min(0.0);
    let pos = ((a + q + z_prev) / 3.0).max(0.0);
    if relu_z_objective(neg, a, z_prev, q) < relu_z_objective(pos, a, z_prev, q) {
        neg
    } else {
        pos
    }
}

/// Hidden-layer z update for ReLU, entrywise. `a = W p + b 1^T`.
pub fn update_z_hidden(a: &Matrix, z_prev: &Matrix, q: &Matrix) -> Result<Matrix> {
    a.check_same_shape(z_prev, "update_z_hidden")?;
    a.check_same_shape(q, "update_z_hidden")?;
    let data = a
        .as_slice()
        .iter()
        .zip(z_prev.as_slice())
        .zip(q.as_slice())
        .map(|((&a, &zp), &q)| relu_z_entry(a, zp, q))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FistaOutcome {
    pub z: Matrix,
    pub iterations: usize,
    /// Gradient norm of the full objective at `z`.
    pub grad_norm: f64,
}

/// Minimizes `risk(z) + (nu/2) ||z - a||^2` by FISTA from `z_start` with
/// step `1 / (risk_lipschitz + nu)`. `risk` returns value and gradient.
pub fn fista_output(
    a: &Matrix,
    z_start: &Matrix,
    nu: f64,
    risk_lipschitz: f64,
    max_iters: usize,
    tol: f64,
    risk: impl Fn(&Matrix) -> (f64, Matrix),
) -> Result<FistaOutcome> {
    a.check_same_shape(z_start, "fista_output")?;
    let step = 1.0 / (risk_lipschitz + nu);
    let full_grad = |z: &Matrix| -> Result<Matrix> {
        let (_, mut g) = risk(z);
        g.axpy(nu, z)?;
        g.axpy(-nu, a)?;
        Ok(g)
    };
    let mut x = z_start.clone();
    let mut g = full_grad(&x)?;
    let mut grad_norm = frob_sq(&g).sqrt();
    if grad_norm <= tol {
        return Ok(FistaOutcome {
            z: x,
            iterations: 0,
            grad_norm,
        });
    }
    let mut y = x.clone();
    let mut gy = g;
    let mut t = 1.0f64;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut x_next = y.clone();
        x_next.axpy(-step, &gy)?;
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        let mut y_next = x_next.clone();
        y_next.axpy(momentum, &x_next.sub(&x)?)?;
        if !y_next.is_finite() {
            return Err(Error::NonFinite("FISTA iterate".into()));
        }
        x = x_next;
        t = t_next;
        g = full_grad(&x)?;
        grad_norm = frob_sq(&g).sqrt();
        if grad_norm <= tol {
            break;
        }
        y = y_next;
        gy = full_grad(&y)?;
    }
    Ok(FistaOutcome {
        z: x,
        iterations,
        grad_norm,
    })
}

/// Output-layer z update: softmax cross-entropy plus the fit penalty.
///
/// FISTA is not monotone, so when it stops early at a point worse than the
/// warm start the warm start is returned instead.
pub fn update_z_output(a: &Matrix, z_prev: &Matrix, labels: &Matrix, hp: &HyperParams) -> Result<FistaOutcome> {
    a.check_same_shape(labels, "update_z_output")?;
    let out = fista_output(a, z_prev, hp.nu, 1.0, hp.fista_max_iters, hp.fista_tol, |z| {
        softmax_cross_entropy_unchecked(z, labels)
    })?;
    if out.iterations > 0 && output_objective(&out.z, a, labels, hp.nu)? > output_objective(z_prev, a, labels, hp.nu)? {
        let (_, mut g) = softmax_cross_entropy_unchecked(z_prev, labels);
        g.axpy(hp.nu, z_prev)?;
        g.axpy(-hp.nu, a)?;
        return Ok(FistaOutcome {
            z: z_prev.clone(),
            iterations: out.iterations,
            grad_norm: frob_sq(&g).sqrt(),
        });
    }
    Ok(out)
}

/// Value of the output z objective, `R(z; y) + (nu/2) ||z - a||^2`.
pub fn output_objective(z: &Matrix, a: &Matrix, labels: &Matrix, nu: f64) -> Result<f64> {
    Ok(softmax_cross_entropy_loss(z, labels) + 0.5 * nu * crate::matrix::frob_sq_diff(z, a)?)
}

/// `q = (rho p_next + u + nu f(z)) / (rho + nu)`, the exact minimizer.
pub fn update_q(p_next: &Matrix, u: &Matrix, z: &Matrix, rho: f64, nu: f64) -> Result<Matrix> {
    p_next.check_same_shape(u, "update_q")?;
    p_next.check_same_shape(z, "update_q")?;
    let denom = rho + nu;
    let data = p_next
        .as_slice()
        .iter()
        .zip(u.as_slice())
        .zip(z.as_slice())
        .map(|((&p, &u), &z)| (rho * p + u + nu * z.max(0.0)) / denom)
        .collect();
    Matrix::from_vec(p_next.rows(), p_next.cols(), data)
}

/// Dual ascent `u + rho (p_next - q)`; also returns the residual `p_next - q`.
pub fn update_u(u: &Matrix, p_next: &Matrix, q: &Matrix, rho: f64) -> Result<(Matrix, Matrix)> {
    let r = p_next.sub(q)?;
    let mut u_new = u.clone();
    u_new.axpy(rho, &r)?;
    Ok((u_new, r))
}

/// `<u, p - q>` summed entrywise; exposed for diagnostics.
pub fn dual_term(u: &Matrix, p: &Matrix, q: &Matrix) -> Result<f64> {
    inner(u, &p.sub(q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[[v]])
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    // independent phi: explicit loops, no shared helpers
    fn phi_oracle(nu: f64, rho: f64, z: &Matrix, w: &Matrix, p: &Matrix, b: &[f64], qu: Option<(&Matrix, &Matrix)>) -> f64 {
        let mut fit = 0.0;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let mut wp = 0.0;
                for k in 0..w.cols() {
                    wp += w.get(i, k) * p.get(k, j);
                }
                let r = z.get(i, j) - wp - b[i];
                fit += r * r;
            }
        }
        let mut extra = 0.0;
        if let Some((q, u)) = qu {
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    let d = p.get(i, j) - q.get(i, j);
                    extra += u.get(i, j) * d + rho / 2.0 * d * d;
                }
            }
        }
        nu / 2.0 * fit + extra
    }

    struct Instance {
        z: Matrix,
        w: Matrix,
        p: Matrix,
        b: Vec<f64>,
        q: Matrix,
        u: Matrix,
    }

    impl Instance {
        fn random(n_out: usize, n_in: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
            Instance {
                z: random(n_out, n, rng),
                w: random(n_out, n_in, rng),
                p: random(n_in, n, rng),
                b: (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
                q: random(n_in, n, rng),
                u: random(n_in, n, rng),
            }
        }

        fn ctx(&self, nu: f64, rho: f64, coupled: bool) -> PhiContext<'_> {
            PhiContext {
                nu,
                rho,
                z: &self.z,
                w: &self.w,
                p: &self.p,
                b: &self.b,
                coupling: coupled.then_some(Coupling {
                    q_prev: &self.q,
                    u_prev: &self.u,
                }),
            }
        }
    }

    #[test]
    fn phi_zero_at_forward_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 2, &mut rng);
        let p = random(2, 4, &mut rng);
        let b = vec![0.5, -0.25, 1.0];
        let z = matmul(&w, &p).unwrap().add_row_bias(&b).unwrap();
        let u = Matrix::zeros(2, 4);
        let ctx = PhiContext {
            nu: 0.7,
            rho: 1.3,
            z: &z,
            w: &w,
            p: &p,
            b: &b,
            coupling: Some(Coupling { q_prev: &p, u_prev: &u }),
        };
        assert!(eval_phi(&ctx).unwrap().abs() < 1e-24);
        for wrt in [PhiVar::P, PhiVar::W, PhiVar::B] {
            assert!(grad_phi(&ctx, wrt).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn phi_scalar_hand_value() {
        let (z, w, p, q, u) = (scalar(3.0), scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0));
        let ctx = PhiContext {
            nu: 2.0,
            rho: 4.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[0.0],
            coupling: Some(Coupling { q_prev: &q, u_prev: &u }),
        };
        assert_eq!(eval_phi(&ctx).unwrap(), 7.0);
    }

    #[test]
    fn phi_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for coupled in [false, true] {
            let inst = Instance::random(4, 3, 5, &mut rng);
            let got = eval_phi(&inst.ctx(0.3, 1.7, coupled)).unwrap();
            let want = phi_oracle(0.3, 1.7, &inst.z, &inst.w, &inst.p, &inst.b, coupled.then_some((&inst.q, &inst.u)));
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = Instance::random(4, 3, 3, &mut rng);
        let (nu, rho) = (0.8, 1.5);
        let ctx = inst.ctx(nu, rho, true);
        let h = 1e-6;
        let f = |inst: &Instance| eval_phi(&inst.ctx(nu, rho, true)).unwrap();
        let check = |fd: f64, g: f64| assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-2), "{fd} vs {g}");

        let gp = grad_phi(&ctx, PhiVar::P).unwrap();
        for i in 0..inst.p.as_slice().len() {
            let mut hi = Instance { ..clone_inst(&inst) };
            hi.p.as_mut_slice()[i] += h;
            let mut lo = clone_inst(&inst);
            lo.p.as_mut_slice()[i] -= h;
            check((f(&hi) - f(&lo)) / (2.0 * h), gp.as_slice()[i]);
        }
        let gw = grad_phi(&ctx, PhiVar::W).unwrap();
        for i in 0..inst.w.as_slice().len() {
            let mut hi = clone_inst(&inst);
            hi.w.as_mut_slice()[i] += h;
            let mut lo = clone_inst(&inst);
            lo.w.as_mut_slice()[i] -= h;
            check((f(&hi) - f(&lo)) / (2.0 * h), gw.as_slice()[i]);
        }
        let gb = grad_phi(&ctx, PhiVar::B).unwrap();
        for i in 0..inst.b.len() {
            let mut hi = clone_inst(&inst);
            hi.b[i] += h;
            let mut lo = clone_inst(&inst);
            lo.b[i] -= h;
            check((f(&hi) - f(&lo)) / (2.0 * h), gb.as_slice()[i]);
        }
    }

    fn clone_inst(i: &Instance) -> Instance {
        Instance {
            z: i.z.clone(),
            w: i.w.clone(),
            p: i.p.clone(),
            b: i.b.clone(),
            q: i.q.clone(),
            u: i.u.clone(),
        }
    }

    #[test]
    fn w_gradient_scalar_case() {
        let (z, w, p) = (scalar(2.0), scalar(1.0), scalar(1.0));
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[0.0],
            coupling: None,
        };
        assert_eq!(grad_phi(&ctx, PhiVar::W).unwrap(), scalar(-1.0));
    }

    #[test]
    fn p_gradient_refused_on_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = Instance::random(2, 2, 2, &mut rng);
        let ctx = inst.ctx(1.0, 1.0, false);
        assert!(grad_phi(&ctx, PhiVar::P).is_err());
        assert!(update_p(&ctx, 1.0, &HyperParams::default()).is_err());
    }

    #[test]
    fn update_p_stationary_when_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(3, 2, &mut rng);
        let p = random(2, 4, &mut rng);
        let b = vec![0.0; 3];
        let z = matmul(&w, &p).unwrap();
        let u = Matrix::zeros(2, 4);
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &b,
            coupling: Some(Coupling { q_prev: &p, u_prev: &u }),
        };
        let res = update_p(&ctx, 1.0, &HyperParams::default()).unwrap();
        assert_eq!(res.new_point, p);
        assert_eq!(res.step_coeff, 1.0);
    }

    #[test]
    fn update_p_scalar_instance() {
        let (z, w, p, q, u) = (scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0), scalar(0.0));
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[0.0],
            coupling: Some(Coupling { q_prev: &q, u_prev: &u }),
        };
        assert_eq!(grad_phi(&ctx, PhiVar::P).unwrap(), scalar(2.0));
        let hp = HyperParams::default();
        let res = update_p(&ctx, 2.0, &hp).unwrap();
        assert_eq!(res.step_coeff, 2.0);
        assert_eq!(res.new_point, scalar(0.0));
        assert!(res.surrogate_gap <= 0.0);
        // phi(0) = 0 and U(0) = phi(1) - 2 + 1 = 0: equality, certified
        let p0 = scalar(0.0);
        let phi_new = eval_phi(&PhiContext { p: &p0, ..ctx }).unwrap();
        assert_eq!(phi_new, 0.0);
        // grid check: U(.; 2) lies above phi everywhere on [-3, 3]
        for k in -300..=300 {
            let x = k as f64 / 100.0;
            let px = scalar(x);
            let phi = eval_phi(&PhiContext { p: &px, ..ctx }).unwrap();
            let surrogate = 1.0 + 2.0 * (x - 1.0) + (x - 1.0) * (x - 1.0);
            assert!(phi <= surrogate + 1e-12);
        }
        // a seed below the curvature is grown until certified
        let res = update_p(&ctx, 0.1, &hp).unwrap();
        assert!(res.step_coeff >= 2.0 && res.surrogate_gap <= 0.0);
    }

    #[test]
    fn update_w_scalar_boundary_case() {
        let (z, w, p) = (scalar(2.0), scalar(1.0), scalar(1.0));
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[0.0],
            coupling: None,
        };
        let res = update_w(&ctx, 1.0, &HyperParams::default()).unwrap();
        assert_eq!(res.step_coeff, 1.0);
        assert_eq!(res.new_point, scalar(2.0));
        assert_eq!(res.surrogate_gap, 0.0);
    }

    #[test]
    fn update_w_unchanged_at_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(3, 2, &mut rng);
        let p = random(2, 4, &mut rng);
        let b = vec![0.1, 0.2, 0.3];
        let z = matmul(&w, &p).unwrap().add_row_bias(&b).unwrap();
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &b,
            coupling: None,
        };
        let res = update_w(&ctx, 0.5, &HyperParams::default()).unwrap();
        assert!(res.new_point.sub(&w).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn majorization_certified_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hp = HyperParams::default();
        for _ in 0..100 {
            let inst = Instance::random(rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6), &mut rng);
            let nu = rng.random_range(0.01..2.0);
            let rho = rng.random_range(0.01..2.0);
            let seed = 10f64.powf(rng.random_range(-4.0..2.0));
            let ctx = inst.ctx(nu, rho, true);
            let phi0 = eval_phi(&ctx).unwrap();
            let tol = |u: f64| 1e-10 * (1.0 + u.abs());

            let res = update_p(&ctx, seed, &hp).unwrap();
            assert!(res.surrogate_gap <= 1e-10);
            let step = res.new_point.sub(&inst.p).unwrap();
            let u = phi0 + inner(&grad_phi(&ctx, PhiVar::P).unwrap(), &step).unwrap() + res.step_coeff / 2.0 * frob_sq(&step);
            let phi_new = eval_phi(&PhiContext { p: &res.new_point, ..ctx }).unwrap();
            assert!(phi_new <= u + tol(u), "p: {phi_new} > {u}");

            let res = update_w(&ctx, seed, &hp).unwrap();
            assert!(res.surrogate_gap <= 1e-10);
            let step = res.new_point.sub(&inst.w).unwrap();
            let u = phi0 + inner(&grad_phi(&ctx, PhiVar::W).unwrap(), &step).unwrap() + res.step_coeff / 2.0 * frob_sq(&step);
            let phi_new = eval_phi(&PhiContext { w: &res.new_point, ..ctx }).unwrap();
            assert!(phi_new <= u + tol(u), "W: {phi_new} > {u}");
        }
    }

    #[test]
    fn bias_update_cases() {
        // single sample: equals z - W p
        let (z, w, p) = (scalar(3.0), scalar(2.0), scalar(0.5));
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[7.0],
            coupling: None,
        };
        assert_eq!(update_b(&ctx).unwrap(), vec![2.0]);
        // two samples with z - W p = [1, 3]
        let z = Matrix::from_rows(&[[1.0, 3.0]]);
        let w = scalar(0.0);
        let p = Matrix::from_rows(&[[1.0, 1.0]]);
        let ctx = PhiContext {
            nu: 1.0,
            rho: 1.0,
            z: &z,
            w: &w,
            p: &p,
            b: &[0.0],
            coupling: None,
        };
        let b = update_b(&ctx).unwrap();
        assert_eq!(b, vec![2.0]);
        // fixed point
        let ctx2 = PhiContext { b: &b, ..ctx };
        assert_eq!(update_b(&ctx2).unwrap(), b);
    }

    #[test]
    fn relu_z_update_cases() {
        assert_eq!(relu_z_entry(1.5, 1.5, 1.5), 1.5);
        assert_eq!(relu_z_entry(-1.5, -1.5, 0.0), -1.5);
        // candidates -2 (3 nu) and 0 (7 nu); the helper drops the nu/2 factor
        assert_eq!(relu_z_objective(-2.0, -3.0, -1.0, 2.0), 6.0);
        assert_eq!(relu_z_objective(0.0, -3.0, -1.0, 2.0), 14.0);
        assert_eq!(relu_z_entry(-3.0, -1.0, 2.0), -2.0);
        let mut best = (f64::INFINITY, 0.0);
        for k in -100_000..=100_000 {
            let z = k as f64 * 1e-4;
            let v = relu_z_objective(z, -3.0, -1.0, 2.0);
            if v < best.0 {
                best = (v, z);
            }
        }
        assert!((best.1 + 2.0).abs() < 1e-4);
    }

    #[test]
    fn q_and_u_updates() {
        let q = update_q(&scalar(4.0), &scalar(0.0), &scalar(2.0), 1.0, 1.0).unwrap();
        assert_eq!(q, scalar(3.0));
        let q = update_q(&scalar(0.0), &scalar(0.0), &scalar(4.0), 3.0, 1.0).unwrap();
        assert_eq!(q, scalar(1.0));
        let (u, r) = update_u(&scalar(0.0), &scalar(2.0), &scalar(1.0), 1.0).unwrap();
        assert_eq!((u, r), (scalar(1.0), scalar(1.0)));
        let (u, _) = update_u(&scalar(0.3), &scalar(2.0), &scalar(2.0), 5.0).unwrap();
        assert_eq!(u, scalar(0.3));
    }

    #[test]
    fn dual_identity_after_q_then_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (rho, nu) = (rng.random_range(0.01..3.0), rng.random_range(0.01..3.0));
            let p_next = scalar(rng.random_range(-2.0..2.0));
            let u = scalar(rng.random_range(-2.0..2.0));
            let z = scalar(rng.random_range(-2.0..2.0));
            let q = update_q(&p_next, &u, &z, rho, nu).unwrap();
            let (u_new, _) = update_u(&u, &p_next, &q, rho).unwrap();
            let identity = nu * (q.get(0, 0) - z.get(0, 0).max(0.0));
            assert!((u_new.get(0, 0) - identity).abs() <= 1e-10);
        }
    }

    #[test]
    fn fista_with_zero_risk_returns_affine_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(3, 4, &mut rng);
        let z0 = random(3, 4, &mut rng);
        let out = fista_output(&a, &z0, 0.5, 1.0, 200, 1e-10, |z| (0.0, Matrix::zeros(z.rows(), z.cols()))).unwrap();
        assert!(out.grad_norm <= 1e-10);
        assert!(out.z.sub(&a).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn fista_two_class_matches_grid_search() {
        let a = Matrix::column(&[0.3, -0.4]);
        let y = Matrix::column(&[0.0, 1.0]);
        let z0 = Matrix::column(&[0.0, 0.0]);
        let hp = HyperParams {
            nu: 0.5,
            fista_max_iters: 500,
            fista_tol: 1e-10,
            ..HyperParams::default()
        };
        let out = update_z_output(&a, &z0, &y, &hp).unwrap();
        assert!(out.grad_norm <= hp.fista_tol);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 800;
        for i in 0..=steps {
            for j in 0..=steps {
                let z1 = -2.0 + 4.0 * i as f64 / steps as f64;
                let z2 = -2.0 + 4.0 * j as f64 / steps as f64;
                let z = Matrix::column(&[z1, z2]);
                let v = output_objective(&z, &a, &y, hp.nu).unwrap();
                if v < best.0 {
                    best = (v, z1, z2);
                }
            }
        }
        assert!((out.z.get(0, 0) - best.1).abs() < 1e-3 * 5.0, "{:?} vs {:?}", out.z, best);
        assert!((out.z.get(1, 0) - best.2).abs() < 1e-3 * 5.0);
    }

    proptest::proptest! {
        #[test]
        fn z_branch_choice_is_never_beaten_by_the_other(
            a in -10.0f64..10.0,
            zp in -10.0f64..10.0,
            q in -10.0f64..10.0,
        ) {
            let neg = ((a + zp) / 2.0).min(0.0);
            let pos = ((a + q + zp) / 3.0).max(0.0);
            let chosen = relu_z_entry(a, zp, q);
            let rejected = if chosen == pos { neg } else { pos };
            proptest::prop_assert!(
                relu_z_objective(rejected, a, zp, q) >= relu_z_objective(chosen, a, zp, q)
            );
        }

        #[test]
        fn q_update_beats_nearby_points(
            p in -5.0f64..5.0,
            u in -5.0f64..5.0,
            z in -5.0f64..5.0,
            rho in 0.01f64..10.0,
            nu in 0.01f64..10.0,
            h in 1e-3f64..1.0,
        ) {
            let obj = |q: f64| -u * q + 0.5 * rho * (p - q).powi(2) + 0.5 * nu * (q - z.max(0.0)).powi(2);
            let q = update_q(&scalar(p), &scalar(u), &scalar(z), rho, nu).unwrap().get(0, 0);
            let tol = 1e-12 * (1.0 + obj(q).abs());
            proptest::prop_assert!(obj(q) <= obj(q + h) + tol);
            proptest::prop_assert!(obj(q) <= obj(q - h) + tol);
        }
    }
}
