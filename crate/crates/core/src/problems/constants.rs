//! Empirical estimates of the structural constants of a layered objective.

use serde::{Deserialize, Serialize};

use super::{LayeredParams, Objective};
use crate::error::{Error, Result};
use crate::numcore::{min_eigenvalue_spd, Mat, Rng, Vector};
use crate::stackelberg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Strong convexity of `f(M, ·)`.
    pub lambda: f64,
    /// Lipschitz constant of `f` and of its (sub)gradients.
    #[serde(rename = "L")]
    pub l: f64,
    /// Bound on the gradient-noise variance of either block.
    pub sigma2: f64,
    /// Weak-convexity modulus of Φ.
    pub rho: f64,
    pub rho_hat: f64,
    /// Strong convexity of Φ, when it was observed.
    pub lambda_phi: Option<f64>,
    /// `L(λ + 1)/λ`.
    #[serde(rename = "L_phi")]
    pub l_phi: f64,
    /// How the numbers were obtained.
    pub provenance: ConstantsProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsProvenance {
    /// `"empirical"` or `"user"`.
    pub source: String,
    pub n_points: usize,
    pub n_pairs: usize,
    pub n_segments: usize,
    pub batch_size: usize,
    /// Smallest sampled eigenvalue of `∇²_w f`, when sampled.
    pub lambda_sampled: Option<f64>,
    /// Analytic floor on λ, when the objective supplies one.
    pub lambda_floor: Option<f64>,
    /// Smallest and largest second differences of Φ along the segments.
    pub phi_curvature_range: Option<(f64, f64)>,
}

impl ProblemConstants {
    /// Constants supplied directly; `L_Φ` is derived.
    pub fn user(lambda: f64, l: f64, sigma2: f64, rho: f64, rho_hat: f64, lambda_phi: Option<f64>) -> Result<Self> {
        let c = Self {
            lambda,
            l,
            sigma2,
            rho,
            rho_hat,
            lambda_phi,
            l_phi: Self::l_phi_of(l, lambda),
            provenance: ConstantsProvenance {
                source: "user".into(),
                n_points: 0,
                n_pairs: 0,
                n_segments: 0,
                batch_size: 0,
                lambda_sampled: None,
                lambda_floor: None,
                phi_curvature_range: None,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn l_phi_of(l: f64, lambda: f64) -> f64 {
        l * (lambda + 1.0) / lambda
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos(self.lambda, "lambda")?;
        pos(self.l, "L")?;
        pos(self.rho_hat, "rho_hat")?;
        if !(self.sigma2 >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::InvalidArgument("sigma2 and rho must be nonnegative".into()));
        }
        if self.rho_hat <= self.rho {
            return Err(Error::InvalidArgument(format!("rho_hat = {} must exceed rho = {}", self.rho_hat, self.rho)));
        }
        if let Some(lp) = self.lambda_phi {
            pos(lp, "lambda_phi")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub n_points: usize,
    pub batch_size: usize,
    /// Draws per point for objectives without an exact variance formula.
    pub variance_draws: usize,
    /// Half-length of the segments used for second differences of Φ.
    pub segment_len: f64,
    /// Length of the local perturbations used for difference quotients.
    pub pair_len: f64,
    /// `ρ̂ = rho_hat_factor · ρ` when `ρ > 0`.
    pub rho_hat_factor: f64,
    /// `ρ̂` when no negative curvature is observed.
    pub rho_hat_fallback: f64,
    /// Sample around this point (Gaussian spread, then projected) instead
    /// of over the whole feasible sets.
    pub center: Option<LayeredParams>,
    pub spread: f64,
    /// Inner tolerance for best responses.
    pub inner_tol: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            n_points: 256,
            batch_size: 1,
            variance_draws: 64,
            segment_len: 1e-3,
            pair_len: 1e-3,
            rho_hat_factor: 2.0,
            rho_hat_fallback: 1.0,
            center: None,
            spread: 0.1,
            inner_tol: 1e-10,
        }
    }
}

fn sample_point<O: Objective + ?Sized>(obj: &O, opts: &EstimateOptions, rng: &mut Rng) -> Result<LayeredParams> {
    let (m, n) = obj.body_shape();
    match &opts.center {
        Some(c) => {
            obj.check_shapes(c)?;
            let mut body = c.body.clone();
            for v in body.as_mut_slice() {
                *v += opts.spread * rng.normal();
            }
            let mut head = c.head.clone();
            for v in head.as_mut_slice() {
                *v += opts.spread * rng.normal();
            }
            LayeredParams::new(obj.body_set().project_mat(&body), obj.head_set().project_vec(&head))
        }
        None => {
            let body = Mat::new(m, n, obj.body_set().sample(m * n, rng)?)?;
            let head = Vector::new(obj.head_set().sample(n, rng)?)?;
            LayeredParams::new(body, head)
        }
    }
}

fn unit_direction(len: usize, rng: &mut Rng) -> Vec<f64> {
    let mut d = rng.normals(len);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for v in d.iter_mut() {
        *v /= norm;
    }
    d
}

fn shifted(body: &Mat, dir: &[f64], t: f64) -> Mat {
    let mut out = body.clone();
    for (v, d) in out.as_mut_slice().iter_mut().zip(dir) {
        *v += t * d;
    }
    out
}

/// Samples `opts.n_points` feasible points and estimates every constant
/// from them:
///
/// - λ: the analytic floor when the objective has one, otherwise the
///   smallest sampled eigenvalue of `∇²_w f`;
/// - L: the largest difference quotient of `f`, `∇_w f` and `G_M` over
///   nearby and far pairs;
/// - σ²: the largest per-point gradient variance at `opts.batch_size`;
/// - ρ and λ_Φ: the most negative and the smallest positive second
///   difference of Φ along short random segments inside ℳ.
pub fn estimate_constants<O: Objective + ?Sized>(obj: &O, opts: &EstimateOptions, rng: &mut Rng) -> Result<ProblemConstants> {
    if !obj.body_set().is_bounded() || !obj.head_set().is_bounded() {
        return Err(Error::InvalidArgument("estimate_constants needs bounded constraint sets".into()));
    }
    if opts.n_points < 2 {
        return Err(Error::InvalidArgument("estimate_constants needs at least two points".into()));
    }
    let (m, n) = obj.body_shape();
    let points: Vec<LayeredParams> = (0..opts.n_points).map(|_| sample_point(obj, opts, rng)).collect::<Result<_>>()?;

    let lambda_floor = obj.head_strong_convexity_floor();
    let mut lambda_sampled = f64::INFINITY;
    let mut sigma2: f64 = 0.0;
    for p in &points {
        let h = obj.head_hessian(p)?;
        lambda_sampled = lambda_sampled.min(min_eigenvalue_spd(&h, 1e-10, 10_000)?);
        let (vm, vw) = obj.gradient_variance(p, opts.batch_size, opts.variance_draws, rng)?;
        sigma2 = sigma2.max(vm).max(vw);
    }
    let lambda = lambda_floor.unwrap_or(lambda_sampled);
    if !(lambda > 0.0) {
        return Err(Error::NotStronglyConvex(format!(
            "sampled head Hessians have minimum eigenvalue {lambda_sampled:.3e}"
        )));
    }

    let mut l: f64 = 0.0;
    let mut n_pairs = 0;
    for (i, p) in points.iter().enumerate() {
        let far = &points[(i + 1) % points.len()];
        let dm = unit_direction(m * n, rng);
        let dw = unit_direction(n, rng);
        let near = LayeredParams::new(
            obj.body_set().project_mat(&shifted(&p.body, &dm, opts.pair_len)),
            obj.head_set().project_vec(&Vector::from_vec(p.head.as_slice().iter().zip(&dw).map(|(v, d)| v + opts.pair_len * d).collect())),
        )?;
        for q in [near, far.clone()] {
            let dmn = p.body.frob_dist(&q.body);
            let dwn = p.head.dist(&q.head);
            if dmn + dwn == 0.0 {
                continue;
            }
            n_pairs += 1;
            l = l.max((obj.loss(p)? - obj.loss(&q)?).abs() / (dmn + dwn));
            l = l.max(obj.grad_head(p)?.dist(&obj.grad_head(&q)?) / (dmn + dwn));
            if dwn > 0.0 {
                let mixed = LayeredParams::new(p.body.clone(), q.head.clone())?;
                l = l.max(obj.subgrad_body(p)?.frob_dist(&obj.subgrad_body(&mixed)?) / dwn);
            }
        }
    }
    if !(l > 0.0) {
        l = f64::MIN_POSITIVE.sqrt();
    }

    let t = opts.segment_len;
    let mut curv_min = f64::INFINITY;
    let mut curv_max = f64::NEG_INFINITY;
    let mut n_segments = 0;
    for p in &points {
        let dir = unit_direction(m * n, rng);
        let up = shifted(&p.body, &dir, t);
        let dn = shifted(&p.body, &dir, -t);
        if !obj.body_set().contains(up.as_slice(), 0.0) || !obj.body_set().contains(dn.as_slice(), 0.0) {
            continue;
        }
        let c = (stackelberg::phi(obj, &up, opts.inner_tol)? - 2.0 * stackelberg::phi(obj, &p.body, opts.inner_tol)?
            + stackelberg::phi(obj, &dn, opts.inner_tol)?)
            / (t * t);
        curv_min = curv_min.min(c);
        curv_max = curv_max.max(c);
        n_segments += 1;
    }
    let (rho, lambda_phi) = if n_segments == 0 {
        (0.0, None)
    } else {
        ((-curv_min).max(0.0), (curv_min > 1e-8).then_some(curv_min))
    };
    let rho_hat = if rho > 0.0 { opts.rho_hat_factor * rho } else { opts.rho_hat_fallback };

    let c = ProblemConstants {
        lambda,
        l,
        sigma2,
        rho,
        rho_hat,
        lambda_phi,
        l_phi: ProblemConstants::l_phi_of(l, lambda),
        provenance: ConstantsProvenance {
            source: "empirical".into(),
            n_points: points.len(),
            n_pairs,
            n_segments,
            batch_size: opts.batch_size,
            lambda_sampled: Some(lambda_sampled),
            lambda_floor,
            phi_curvature_range: (n_segments > 0).then_some((curv_min, curv_max)),
        },
    };
    c.validate()?;
    Ok(c)
}
