//! The reduced objective `Φ(M) = f(M, w*(M))` and the tools built on it:
//! best responses, Danskin subgradients, the Moreau envelope and its
//! stationarity measure.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Cholesky, Mat, Vector};
use crate::problems::{Activation, KinkGenerator, LayeredParams, Objective, RegressionDataset};

pub const BEST_RESPONSE_TOL: f64 = 1e-9;
pub const PROX_TOL: f64 = 1e-7;
pub const INNER_MAX_ITERS: usize = 100_000;
pub const PROX_MAX_ITERS: usize = 20_000;
/// Accepted PGD steps below `STALL_STEP/ρ̂` end the smooth phase.
const STALL_STEP: f64 = 1e-3;
/// Kink radii for the subdifferential phase, relative to `‖M − M̂‖`.
const KINK_RADIUS_START: f64 = 1e-6;
const KINK_RADIUS_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestResponseMethod {
    ClosedForm,
    InnerGd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub w_star: Vector,
    pub method: BestResponseMethod,
    pub inner_iters: usize,
    /// Norm of the projected-gradient mapping of `f(M, ·)` at `w_star`.
    pub residual: f64,
}

fn gradient_mapping<O: Objective + ?Sized>(obj: &O, body: &Mat, w: &Vector, step: f64) -> Result<(Vector, f64)> {
    let p = LayeredParams::new(body.clone(), w.clone())?;
    let g = obj.grad_head(&p)?;
    let mut next = w.clone();
    next.axpy(-step, &g);
    let next = obj.head_set().project_vec(&next);
    let res = next.dist(w) / step;
    Ok((next, res))
}

/// `w*(M) = argmin_{w ∈ 𝒲} f(M, w)`.
pub fn best_response<O: Objective + ?Sized>(obj: &O, body: &Mat, tol: f64) -> Result<BestResponse> {
    best_response_from(obj, body, tol, None)
}

/// As [`best_response`], warm-starting the iterative path from `warm`.
///
/// The closed form is used whenever it lands inside 𝒲; otherwise projected
/// gradient descent with step `1/smoothness` runs until the gradient
/// mapping is at most `tol`.
pub fn best_response_from<O: Objective + ?Sized>(obj: &O, body: &Mat, tol: f64, warm: Option<&Vector>) -> Result<BestResponse> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let (m, n) = obj.body_shape();
    if body.shape() != (m, n) {
        return Err(Error::dim("best_response", format!("expected body {m}x{n}, got {}x{}", body.rows(), body.cols())));
    }
    let smooth = obj.head_smoothness(body)?;
    if !(smooth > 0.0) || !smooth.is_finite() {
        return Err(Error::NonFinite {
            context: format!("head smoothness {smooth} at the given body"),
        });
    }
    let step = 1.0 / smooth;
    let mut start = warm.cloned();
    if let Some(cf) = obj.closed_form_best_response(body) {
        let w = cf?;
        if !w.is_finite() {
            return Err(Error::NonFinite { context: "closed-form best response".into() });
        }
        if obj.head_set().contains(w.as_slice(), 0.0) {
            let (_, residual) = gradient_mapping(obj, body, &w, step)?;
            return Ok(BestResponse {
                w_star: w,
                method: BestResponseMethod::ClosedForm,
                inner_iters: 0,
                residual,
            });
        }
        start = Some(obj.head_set().project_vec(&w));
    }
    let mut w = match start {
        Some(w) if w.len() == n => obj.head_set().project_vec(&w),
        _ => obj.head_set().project_vec(&Vector::zeros(n)),
    };
    let mut residual = f64::INFINITY;
    for it in 0..INNER_MAX_ITERS {
        let (next, res) = gradient_mapping(obj, body, &w, step)?;
        residual = res;
        if !residual.is_finite() {
            return Err(Error::NonFinite { context: "best-response iteration".into() });
        }
        if residual <= tol {
            return Ok(BestResponse {
                w_star: w,
                method: BestResponseMethod::InnerGd,
                inner_iters: it,
                residual,
            });
        }
        w = next;
    }
    Err(Error::NoConvergence {
        solver: "best_response",
        iters: INNER_MAX_ITERS,
        residual,
    })
}

/// `Φ(M) = f(M, w*(M))`.
pub fn phi<O: Objective + ?Sized>(obj: &O, body: &Mat, tol: f64) -> Result<f64> {
    let br = best_response(obj, body, tol)?;
    obj.loss(&LayeredParams::new(body.clone(), br.w_star)?)
}

/// `Φ(M)` for squared-loss regression without solving for `w*`:
/// `Yᵀ(I + (2/λ)φ(XM)φ(XM)ᵀ)⁻¹Y`.
pub fn phi_woodbury(d: &RegressionDataset, act: Activation, body: &Mat) -> Result<f64> {
    if !(d.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "the Woodbury form needs lambda > 0, got {}",
            d.lambda
        )));
    }
    let z = d.x.matmul(body)?;
    let feat = z.map(|a| act.apply(a));
    let mut k = feat.matmul(&feat.transpose())?.scaled(2.0 / d.lambda);
    k.add_diagonal(1.0);
    let sol = Cholesky::factor(&k)?.solve(&d.y)?;
    Ok(d.y.dot(&sol))
}

/// `∂_M f(M, w*(M))`, an element of `∂Φ(M)`.
pub fn phi_subgrad<O: Objective + ?Sized>(obj: &O, body: &Mat, tol: f64) -> Result<Mat> {
    let br = best_response(obj, body, tol)?;
    obj.subgrad_body(&LayeredParams::new(body.clone(), br.w_star)?)
}

fn phi_and_subgrad<O: Objective + ?Sized>(obj: &O, body: &Mat, tol: f64, warm: Option<&Vector>) -> Result<(f64, Mat, Vector)> {
    let br = best_response_from(obj, body, tol, warm)?;
    let p = LayeredParams::new(body.clone(), br.w_star)?;
    let v = obj.loss(&p)?;
    let g = obj.subgrad_body(&p)?;
    Ok((v, g, p.head))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoreauProbe {
    pub rho_hat: f64,
    /// The proximal point `M̂`.
    pub m_hat: Mat,
    /// `Φ(M̂) + (ρ̂/2)‖M − M̂‖²`.
    pub envelope_value: f64,
    /// `ρ̂‖M − M̂‖`, the norm of the envelope gradient.
    pub envelope_grad_norm: f64,
    pub iters: usize,
    /// Gradient-mapping norm of the prox objective at `M̂`.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Number of recent gradients kept for the kink-robust residual.
    pub memory: usize,
}

impl Default for ProxOptions {
    fn default() -> Self {
        Self {
            tol: PROX_TOL,
            max_iters: PROX_MAX_ITERS,
            memory: 16,
        }
    }
}

/// Solves `min_{M' ∈ ℳ} Φ(M') + (ρ̂/2)‖M − M'‖²` by projected
/// (sub)gradient steps with backtracking on the prox objective.
///
/// Near kinks of a nonsmooth Φ the gradient mapping need not vanish at the
/// solution. When the iteration stalls, the residual is instead the
/// gradient mapping of the smallest-norm convex combination of the last
/// few gradients; the probe is returned with `converged = false` if that
/// residual is small against the envelope gradient, and stagnation is
/// reported otherwise.
pub fn moreau_prox<O: Objective + ?Sized>(obj: &O, body: &Mat, rho_hat: f64, tol: f64) -> Result<MoreauProbe> {
    moreau_prox_with(obj, body, rho_hat, &ProxOptions { tol, ..Default::default() }, None)
}

pub fn moreau_prox_with<O: Objective + ?Sized>(
    obj: &O,
    body: &Mat,
    rho_hat: f64,
    opts: &ProxOptions,
    warm: Option<&Mat>,
) -> Result<MoreauProbe> {
    if !(rho_hat > 0.0) || !rho_hat.is_finite() {
        return Err(Error::InvalidArgument(format!("rho_hat must be positive, got {rho_hat}")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let set = obj.body_set();
    let inner_tol = BEST_RESPONSE_TOL.min(opts.tol);
    let memory = opts.memory.max(2);
    let value = |x: &Mat, phi_v: f64| phi_v + 0.5 * rho_hat * x.frob_dist(body).powi(2);
    let mapping = |x: &Mat, g: &Mat| set.project_mat(&x.sub(&g.scaled(1.0 / rho_hat))).frob_dist(x) * rho_hat;
    let eval = |x: &Mat, warm_w: Option<&Vector>| -> Result<(f64, Mat, Vector)> {
        let (phi_v, g_phi, w) = phi_and_subgrad(obj, x, inner_tol, warm_w)?;
        let mut g = g_phi;
        g.axpy(rho_hat, &x.sub(body));
        Ok((value(x, phi_v), g, w))
    };

    let mut x = set.project_mat(warm.unwrap_or(body));
    let (mut f_x, mut grad, mut w_warm) = eval(&x, None)?;
    let mut history: Vec<(Mat, Mat)> = vec![(x.clone(), grad.clone())];
    let push = |history: &mut Vec<(Mat, Mat)>, x: &Mat, g: &Mat| {
        if history.len() == memory {
            history.remove(0);
        }
        history.push((x.clone(), g.clone()));
    };
    let mut step = 1.0 / rho_hat;
    let min_step = 1e-14 / rho_hat;
    let mut residual = mapping(&x, &grad);
    let mut iters = 0;

    // Projected gradient with backtracking; exact on smooth pieces.
    while residual > opts.tol && iters < opts.max_iters {
        let mut accepted = None;
        while step >= min_step {
            let trial = set.project_mat(&x.sub(&grad.scaled(step)));
            let d = trial.sub(&x);
            let dn2 = d.frob_norm_sq();
            if dn2 == 0.0 {
                break;
            }
            let (f_t, grad_t, w_t) = eval(&trial, Some(&w_warm))?;
            let decrease = f_t <= f_x + grad.frob_dot(&d) + dn2 / (2.0 * step);
            // Rounding swamps the value test once steps are tiny; a local
            // curvature estimate stands in for it.
            let curvature = grad_t.sub(&grad).frob_norm_sq() <= dn2 / (step * step) && f_t <= f_x + 1e-12 * f_x.abs().max(1.0);
            if decrease || curvature {
                accepted = Some((trial, f_t, grad_t, w_t));
                break;
            }
            step *= 0.5;
        }
        iters += 1;
        let Some((trial, f_t, grad_t, w_t)) = accepted else { break };
        // Repeated deep backtracking means the iterate sits on a kink;
        // hand over to the bundle phase.
        if step < STALL_STEP / rho_hat {
            x = trial;
            f_x = f_t;
            grad = grad_t;
            w_warm = w_t;
            push(&mut history, &x, &grad);
            residual = mapping(&x, &grad);
            break;
        }
        x = trial;
        f_x = f_t;
        grad = grad_t;
        w_warm = w_t;
        push(&mut history, &x, &grad);
        residual = mapping(&x, &grad);
        step = (2.0 * step).min(1e6 / rho_hat);
    }

    // Stalled on a kink the objective can describe: steepest descent along
    // the smallest element of the local subdifferential, widening the kink
    // radius whenever a kink just outside it blocks the step.
    let mut exposed = false;
    if residual > opts.tol {
        let scale = x.frob_dist(body).max(1e-8 * x.frob_norm().max(1.0));
        let mut radius = KINK_RADIUS_START * scale;
        let mut step = 1.0 / rho_hat;
        while iters < opts.max_iters {
            let Some(gens) = obj.kink_generators(&LayeredParams::new(x.clone(), w_warm.clone())?, radius)? else {
                break;
            };
            exposed = true;
            let d = min_norm_with_kinks(&grad, &gens);
            residual = mapping(&x, &d);
            if residual <= opts.tol {
                break;
            }
            iters += 1;
            let mut moved = false;
            let mut s = step;
            while s >= min_step {
                let trial = set.project_mat(&x.sub(&d.scaled(s)));
                let delta = trial.sub(&x);
                if delta.frob_norm_sq() == 0.0 {
                    break;
                }
                let (f_t, grad_t, w_t) = eval(&trial, Some(&w_warm))?;
                if f_t <= f_x + 1e-4 * d.frob_dot(&delta) {
                    x = trial;
                    f_x = f_t;
                    grad = grad_t;
                    w_warm = w_t;
                    step = (2.0 * s).min(1e6 / rho_hat);
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved {
                if radius >= KINK_RADIUS_MAX * scale {
                    break;
                }
                radius = (4.0 * radius).min(KINK_RADIUS_MAX * scale);
            }
        }
    }

    // Otherwise descend along the smallest-norm combination of gradients
    // gathered in a shrinking neighbourhood of the iterate.
    if residual > opts.tol && !exposed {
        let scale = x.frob_norm().max(x.frob_dist(body)).max(1e-8);
        let mut radius = history.iter().map(|(xi, _)| xi.frob_dist(&x)).fold(0.0, f64::max).max(1e-6 * scale);
        let mut step = 1.0 / rho_hat;
        while iters < opts.max_iters && radius > 1e-13 * scale {
            history.retain(|(xi, _)| xi.frob_dist(&x) <= radius);
            if !history.iter().any(|(xi, _)| xi == &x) {
                push(&mut history, &x, &grad);
            }
            let grads: Vec<Mat> = history.iter().map(|(_, g)| g.clone()).collect();
            let d = min_norm_combination(&grads);
            residual = mapping(&x, &d);
            if residual <= opts.tol {
                break;
            }
            iters += 1;
            let mut moved = false;
            let mut probe = None;
            let mut s = step;
            while s >= min_step {
                let trial = set.project_mat(&x.sub(&d.scaled(s)));
                let delta = trial.sub(&x);
                if delta.frob_norm_sq() == 0.0 {
                    break;
                }
                let (f_t, grad_t, w_t) = eval(&trial, Some(&w_warm))?;
                if f_t <= f_x + 1e-4 * d.frob_dot(&delta) {
                    x = trial;
                    f_x = f_t;
                    grad = grad_t;
                    w_warm = w_t;
                    push(&mut history, &x, &grad);
                    step = (2.0 * s).min(1e6 / rho_hat);
                    moved = true;
                    break;
                }
                if delta.frob_norm() <= radius {
                    probe = Some((trial, grad_t));
                }
                s *= 0.5;
            }
            if !moved {
                // Enrich the bundle from across the kink and tighten it.
                if let Some((p, g)) = probe {
                    push(&mut history, &p, &g);
                }
                radius *= 0.5;
            }
        }
        residual = residual.min(mapping(&x, &grad));
    }

    let converged = residual <= opts.tol;
    let dist = x.frob_dist(body);
    let envelope_grad_norm = rho_hat * dist;
    if !converged && residual > 1e-2 * envelope_grad_norm.max(opts.tol.sqrt()) {
        return Err(Error::ProxStagnation {
            iters,
            residual,
            last_iterate: x.into_vec(),
        });
    }
    let phi_hat = f_x - 0.5 * rho_hat * dist * dist;
    Ok(MoreauProbe {
        rho_hat,
        envelope_value: phi_hat + 0.5 * rho_hat * dist * dist,
        m_hat: x,
        envelope_grad_norm,
        iters,
        residual,
        converged,
    })
}

/// `base + Σ θ_k J_k` of least Frobenius norm over the box `θ_k ∈ [lo_k, hi_k]`.
/// Columns decouple; each is a small bound-constrained least-squares
/// problem solved by cyclic coordinate descent.
fn min_norm_with_kinks(base: &Mat, gens: &[KinkGenerator]) -> Mat {
    let mut out = base.clone();
    let (rows, cols) = base.shape();
    for j in 0..cols {
        let mine: Vec<&KinkGenerator> = gens.iter().filter(|g| g.col == j && g.dir.len() == rows).collect();
        if mine.is_empty() {
            continue;
        }
        let mut v: Vec<f64> = (0..rows).map(|i| base.get(i, j)).collect();
        let norms: Vec<f64> = mine.iter().map(|g| g.dir.norm_sq()).collect();
        let mut theta = vec![0.0; mine.len()];
        for _ in 0..500 {
            let mut change: f64 = 0.0;
            for (k, g) in mine.iter().enumerate() {
                if norms[k] == 0.0 {
                    continue;
                }
                let dot: f64 = v.iter().zip(g.dir.as_slice()).map(|(a, b)| a * b).sum();
                let t = (theta[k] - dot / norms[k]).clamp(g.lo, g.hi);
                let dt = t - theta[k];
                if dt != 0.0 {
                    for (vi, di) in v.iter_mut().zip(g.dir.as_slice()) {
                        *vi += dt * di;
                    }
                    theta[k] = t;
                    change = change.max(dt.abs() * norms[k].sqrt());
                }
            }
            if change <= 1e-14 * v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        for (i, vi) in v.into_iter().enumerate() {
            out.set(i, j, vi);
        }
    }
    out
}

/// Smallest-norm point of the convex hull of `gs`, by Frank–Wolfe with
/// exact line search on the simplex weights.
fn min_norm_combination(gs: &[Mat]) -> Mat {
    let k = gs.len();
    let gram: Vec<Vec<f64>> = gs.iter().map(|a| gs.iter().map(|b| a.frob_dot(b)).collect()).collect();
    let mut lam = vec![1.0 / k as f64; k];
    for _ in 0..500 {
        let grad: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[i][j] * lam[j]).sum()).collect();
        let best = (0..k).min_by(|&a, &b| grad[a].total_cmp(&grad[b])).unwrap_or(0);
        // Direction e_best − lam; quadratic in the step.
        let cur: f64 = (0..k).map(|i| lam[i] * grad[i]).sum();
        let num = cur - grad[best];
        let den = gram[best][best] - 2.0 * grad[best] + cur;
        if num <= 1e-16 * cur.abs().max(f64::MIN_POSITIVE) || den <= 0.0 {
            break;
        }
        let t = (num / den).min(1.0);
        for (i, l) in lam.iter_mut().enumerate() {
            *l *= 1.0 - t;
            if i == best {
                *l += t;
            }
        }
    }
    let mut out = Mat::zeros(gs[0].rows(), gs[0].cols());
    for (l, g) in lam.iter().zip(gs) {
        out.axpy(*l, g);
    }
    out
}

/// `‖∇Φ_{1/ρ̂}(M)‖² = ρ̂²‖M − M̂‖²`.
pub fn stationarity<O: Objective + ?Sized>(obj: &O, body: &Mat, rho_hat: f64, tol: f64) -> Result<f64> {
    let probe = moreau_prox(obj, body, rho_hat, tol)?;
    Ok(probe.envelope_grad_norm * probe.envelope_grad_norm)
}

/// Best responses keyed by the exact bytes of `M`, shareable across threads.
#[derive(Debug, Default)]
pub struct BestResponseCache {
    map: Mutex<HashMap<Vec<u64>, BestResponse>>,
}

impl BestResponseCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(body: &Mat) -> Vec<u64> {
        let mut k = Vec::with_capacity(body.as_slice().len() + 2);
        k.push(body.rows() as u64);
        k.push(body.cols() as u64);
        k.extend(body.as_slice().iter().map(|v| v.to_bits()));
        k
    }

    pub fn best_response<O: Objective + ?Sized>(&self, obj: &O, body: &Mat, tol: f64) -> Result<BestResponse> {
        let key = Self::key(body);
        if let Some(hit) = self.map.lock().expect("cache lock poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let br = best_response(obj, body, tol)?;
        self.map.lock().expect("cache lock poisoned").insert(key, br.clone());
        Ok(br)
    }

    pub fn phi<O: Objective + ?Sized>(&self, obj: &O, body: &Mat, tol: f64) -> Result<f64> {
        let br = self.best_response(obj, body, tol)?;
        obj.loss(&LayeredParams::new(body.clone(), br.w_star)?)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd_grad_mat, Rng};
    use crate::problems::{
        toy_phi, toy_phi_minimizer, ClassificationDataset, ClassificationProblem, ConstraintSet, QuadraticObjective, RegressionProblem,
        SyntheticRegression, ToyProblem, TOY_HI, TOY_LO,
    };

    fn scalar_regression(lambda: f64) -> RegressionProblem {
        let d = RegressionDataset::new(Mat::scalar(1.0), Vector::from_vec(vec![1.0]), lambda).unwrap();
        RegressionProblem::new(d, Activation::Identity, 1, ConstraintSet::Free, ConstraintSet::Free).unwrap()
    }

    fn random_regression(seed: u64, n: usize, m: usize, h: usize, lambda: f64, act: Activation) -> RegressionProblem {
        let mut rng = Rng::new(seed);
        let spec = SyntheticRegression {
            n_samples: n,
            n_features: m,
            hidden: h,
            noise_std: 0.3,
            lambda,
        };
        let (d, _) = spec.generate(act, &mut rng).unwrap();
        RegressionProblem::new(d, act, h, ConstraintSet::Free, ConstraintSet::Free).unwrap()
    }

    #[test]
    fn scalar_regression_best_response_and_phi() {
        let p = scalar_regression(0.1);
        let br = best_response(&p, &Mat::scalar(1.0), 1e-9).unwrap();
        assert_eq!(br.method, BestResponseMethod::ClosedForm);
        assert!((br.w_star[0] - 1.0 / 1.05).abs() < 1e-12);
        assert!(br.residual <= 1e-9);
        let v = phi(&p, &Mat::scalar(1.0), 1e-9).unwrap();
        assert!((v - 0.05 / 1.05).abs() < 1e-12);
        assert!((phi_woodbury(&p.data, Activation::Identity, &Mat::scalar(1.0)).unwrap() - 0.05 / 1.05).abs() < 1e-12);
        // Φ(M) = (λ/2)/((λ/2) + M²) on the 1-D instance.
        for m in [0.3, 2.0, -1.5] {
            let expect = 0.05 / (0.05 + m * m);
            assert!((phi(&p, &Mat::scalar(m), 1e-9).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_phi_is_zero() {
        let p = scalar_regression(0.0);
        assert!(phi(&p, &Mat::scalar(2.0), 1e-9).unwrap().abs() < 1e-20);
    }

    #[test]
    fn woodbury_zero_features() {
        let p = random_regression(1, 8, 3, 2, 0.1, Activation::Relu);
        let v = phi_woodbury(&p.data, Activation::Relu, &Mat::zeros(3, 2)).unwrap();
        assert!((v - p.data.y.norm_sq()).abs() < 1e-12);
        let z = RegressionDataset { lambda: 0.0, ..p.data.clone() };
        assert!(phi_woodbury(&z, Activation::Relu, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn woodbury_matches_normal_equations() {
        let mut count = 0;
        for (i, lambda) in [0.01, 0.1, 1.0].into_iter().enumerate() {
            for seed in 0..17 {
                let act = if seed % 2 == 0 { Activation::Relu } else { Activation::Tanh };
                let p = random_regression(100 * i as u64 + seed, 8, 3, 2, lambda, act);
                let mut rng = Rng::new(seed + 1000);
                let body = Mat::new(3, 2, rng.normals(6)).unwrap();
                let a = phi(&p, &body, 1e-9).unwrap();
                let b = phi_woodbury(&p.data, act, &body).unwrap();
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "lambda {lambda} seed {seed}: {a} vs {b}");
                count += 1;
            }
        }
        assert!(count >= 50);
    }

    #[test]
    fn toy_best_response_and_phi() {
        let toy = ToyProblem::default();
        let br = best_response(&toy, &Mat::scalar(1.0), 1e-9).unwrap();
        assert_eq!(br.w_star[0], 1.0);
        assert!((phi(&toy, &Mat::scalar(1.0), 1e-9).unwrap() - 0.1).abs() < 1e-15);
        assert!((phi_subgrad(&toy, &Mat::scalar(1.0), 1e-9).unwrap().get(0, 0) - 0.2).abs() < 1e-12);
        let m_star = toy_phi_minimizer();
        assert!(phi_subgrad(&toy, &Mat::scalar(m_star), 1e-9).unwrap().get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_best_response_is_projection() {
        let q = QuadraticObjective::head_only(Vector::from_vec(vec![2.0, -3.0]), ConstraintSet::FrobeniusBall { radius: 1.0 }).unwrap();
        let br = best_response(&q, &Mat::zeros(1, 2), 1e-10).unwrap();
        let expect = Vector::from_vec(vec![2.0, -3.0]).scaled(1.0 / 13f64.sqrt());
        assert!(br.w_star.dist(&expect) < 1e-12);
    }

    #[test]
    fn iterative_path_agrees_with_closed_form_projection() {
        // A ball that cuts off the ridge solution forces projected gradient.
        let base = random_regression(5, 10, 3, 2, 0.5, Activation::Tanh);
        let body = Mat::new(3, 2, Rng::new(6).normals(6)).unwrap();
        let free = best_response(&base, &body, 1e-10).unwrap().w_star;
        let radius = 0.5 * free.norm();
        let p = RegressionProblem {
            head_set: ConstraintSet::FrobeniusBall { radius },
            ..base
        };
        let br = best_response(&p, &body, 1e-9).unwrap();
        assert_eq!(br.method, BestResponseMethod::InnerGd);
        assert!((br.w_star.norm() - radius).abs() < 1e-9);
        // Optimality against random feasible points.
        let mut rng = Rng::new(7);
        let g = p.grad_head(&LayeredParams::new(body.clone(), br.w_star.clone()).unwrap()).unwrap();
        for _ in 0..100 {
            let w = Vector::from_vec(p.head_set.sample(2, &mut rng).unwrap());
            let d = w.sub(&br.w_star);
            assert!(g.dot(&d) >= -1e-6 * d.norm());
        }
    }

    #[test]
    fn danskin_matches_finite_differences_of_phi() {
        let mut rng = Rng::new(21);
        for seed in 0..50 {
            let p = random_regression(seed, 9, 3, 2, 0.3, Activation::Tanh);
            let body = Mat::new(3, 2, rng.normals(6)).unwrap();
            let g = phi_subgrad(&p, &body, 1e-10).unwrap();
            let fd = fd_grad_mat(|m: &Mat| phi(&p, m, 1e-11), &body, 1e-5).unwrap();
            assert!(g.frob_dist(&fd) <= 1e-4 * g.frob_norm().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn danskin_for_classification() {
        let mut rng = Rng::new(8);
        let x = Mat::new(10, 3, rng.normals(30)).unwrap();
        let y = Vector::from_vec((0..10).map(|i| (i % 2) as f64).collect());
        let d = ClassificationDataset::new(x, y, 0.5).unwrap();
        let p = ClassificationProblem::new(d, Activation::Tanh, 2, ConstraintSet::Free, ConstraintSet::Free).unwrap();
        let body = Mat::new(3, 2, rng.normals(6)).unwrap();
        let g = phi_subgrad(&p, &body, 1e-12).unwrap();
        let fd = fd_grad_mat(|m: &Mat| phi(&p, m, 1e-12), &body, 1e-5).unwrap();
        assert!(g.frob_dist(&fd) <= 1e-5 * g.frob_norm().max(1.0));
    }

    #[test]
    fn phi_is_below_every_head() {
        let p = random_regression(3, 8, 3, 2, 0.1, Activation::Relu);
        let mut rng = Rng::new(4);
        let body = Mat::new(3, 2, rng.normals(6)).unwrap();
        let v = phi(&p, &body, 1e-9).unwrap();
        for _ in 0..100 {
            let w = Vector::from_vec(rng.normals(2)).scaled(3.0);
            assert!(v <= p.loss(&LayeredParams::new(body.clone(), w).unwrap()).unwrap() + 1e-12);
        }
    }

    #[test]
    fn toy_prox_example() {
        let toy = ToyProblem::default();
        let probe = moreau_prox(&toy, &Mat::scalar(1.0), 1.0, 1e-10).unwrap();
        assert!((probe.m_hat.get(0, 0) - 1.0 / 1.2).abs() < 1e-8);
        assert!((probe.envelope_grad_norm - (1.0 - 1.0 / 1.2)).abs() < 1e-8);
        let s = stationarity(&toy, &Mat::scalar(1.0), 1.0, 1e-10).unwrap();
        assert!((s - (1.0f64 / 6.0).powi(2)).abs() < 1e-8);
        assert!(probe.converged);
    }

    #[test]
    fn prox_fixed_point_at_minimizer() {
        let toy = ToyProblem::default();
        let m_star = toy_phi_minimizer();
        let probe = moreau_prox(&toy, &Mat::scalar(m_star), 2.0, 1e-10).unwrap();
        assert!((probe.m_hat.get(0, 0) - m_star).abs() < 1e-9);
        assert!(probe.envelope_grad_norm < 1e-8);
    }

    #[test]
    fn envelope_gradient_matches_differences() {
        let toy = ToyProblem::default();
        let rho = 1.5;
        for m in [0.05, 0.3, 1.0, 4.0] {
            let env = |x: f64| moreau_prox(&toy, &Mat::scalar(x), rho, 1e-12).unwrap().envelope_value;
            let h = 1e-5;
            let fd = (env(m + h) - env(m - h)) / (2.0 * h);
            let probe = moreau_prox(&toy, &Mat::scalar(m), rho, 1e-12).unwrap();
            assert!((fd.abs() - probe.envelope_grad_norm).abs() <= 1e-4, "m {m}: {fd} vs {}", probe.envelope_grad_norm);
        }
    }

    #[test]
    fn envelope_sandwich_on_toy() {
        let toy = ToyProblem::default();
        let phi_star = (0..100_000)
            .map(|i| toy_phi(TOY_LO + (TOY_HI - TOY_LO) * i as f64 / 99_999.0).unwrap())
            .fold(f64::INFINITY, f64::min);
        let mut rng = Rng::new(10);
        for _ in 0..40 {
            let m = rng.uniform_in(TOY_LO, TOY_HI);
            let probe = moreau_prox(&toy, &Mat::scalar(m), 1.0, 1e-9).unwrap();
            let v = toy_phi(m).unwrap();
            assert!(probe.envelope_value <= v + 1e-12);
            assert!(probe.envelope_value >= phi_star - 1e-12);
        }
    }

    #[test]
    fn prox_on_relu_regression_reports_residual() {
        let p = random_regression(12, 16, 4, 3, 0.1, Activation::Relu);
        let p = RegressionProblem {
            body_set: ConstraintSet::FrobeniusBall { radius: 10.0 },
            ..p
        };
        let body = Mat::new(4, 3, Rng::new(13).normals(12)).unwrap().scaled(0.5);
        let probe = moreau_prox(&p, &body, 1000.0, 1e-7).unwrap();
        assert!(probe.envelope_value <= phi(&p, &body, 1e-9).unwrap() + 1e-9);
        assert!(probe.residual <= 1e-2 * probe.envelope_grad_norm);
        // Small rho_hat puts the prox point on a kink.
        let probe = moreau_prox(&p, &body, 20.0, 1e-7).unwrap();
        assert!(probe.converged || probe.residual <= 1e-2 * probe.envelope_grad_norm);
    }

    #[test]
    fn min_norm_with_kinks_respects_the_box() {
        let base = Mat::from_rows(&[vec![1.0, 3.0], vec![1.0, 0.0]]).unwrap();
        let gens = vec![
            KinkGenerator { col: 0, dir: Vector::from_vec(vec![-1.0, 0.0]), lo: 0.0, hi: 0.5 },
            KinkGenerator { col: 1, dir: Vector::from_vec(vec![-1.0, -1.0]), lo: 0.0, hi: 10.0 },
        ];
        let d = min_norm_with_kinks(&base, &gens);
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12 && (d.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((d.get(0, 1) - 1.5).abs() < 1e-9 && (d.get(1, 1) + 1.5).abs() < 1e-9);
    }

    #[test]
    fn min_norm_combination_of_opposing_gradients() {
        let a = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Mat::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let c = min_norm_combination(&[a, b]);
        assert!((c.get(0, 0)).abs() < 1e-12 && (c.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_returns_identical_values() {
        let p = random_regression(2, 8, 3, 2, 0.1, Activation::Relu);
        let cache = BestResponseCache::new();
        let body = Mat::new(3, 2, Rng::new(1).normals(6)).unwrap();
        let a = cache.phi(&p, &body, 1e-9).unwrap();
        let b = cache.phi(&p, &body, 1e-9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(cache.len(), 1);
        assert_eq!(a, phi(&p, &body, 1e-9).unwrap());
    }
}
