//! Analytic (sub)gradients against central finite differences at random
//! points, one named check per oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{fd_grad, fd_grad_mat, Mat, Rng, Vector};
use crate::problems::{
    Activation, ClassificationProblem, ConstraintSet, LayeredParams, RegressionProblem, SyntheticClassification, SyntheticRegression,
};
use crate::stackelberg::{phi, phi_subgrad};
use crate::tdc::{MdpContext, TabularMdp, ValueFeatures};

pub const CHECK_NAMES: [&str; 8] = [
    "reg_grad_w",
    "reg_subgrad_m",
    "clf_grad_w",
    "clf_grad_m",
    "phi_subgrad_regression",
    "phi_subgrad_classification",
    "tdc_grad_m",
    "tdc_grad_w",
];

/// Points with some `|(XM)ᵢⱼ|` below this are redrawn for piecewise
/// activations, so differences never straddle a kink.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub points: usize,
    pub tol: f64,
    pub fd_step: f64,
    pub seed: u64,
    pub regression_activation: Activation,
    pub classification_activation: Activation,
    /// Negative control: the named check's analytic gradient is scaled by
    /// `1 + 1e-3` before comparison.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            points: 100,
            tol: 1e-5,
            fd_step: 1e-5,
            seed: 0,
            regression_activation: Activation::Relu,
            classification_activation: Activation::Tanh,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    /// Largest `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the points.
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn small_regression(act: Activation, rng: &mut Rng) -> Result<(RegressionProblem, LayeredParams)> {
    let gen = SyntheticRegression {
        n_samples: 24,
        n_features: 4,
        hidden: 3,
        noise_std: 0.5,
        lambda: rng.uniform_in(0.05, 1.0),
    };
    let (data, _) = gen.generate(act, rng)?;
    let problem = RegressionProblem::new(data, act, gen.hidden, ConstraintSet::Free, ConstraintSet::Free)?;
    loop {
        let body = Mat::new(4, 3, rng.normals(12))?.scaled(0.5);
        let head = Vector::new(rng.normals(3))?;
        if act.kink_range().is_some() {
            let z = problem.data.x.matmul(&body)?;
            if z.as_slice().iter().any(|v| v.abs() < KINK_MARGIN) {
                continue;
            }
        }
        return Ok((problem, LayeredParams::new(body, head)?));
    }
}

fn small_classification(act: Activation, rng: &mut Rng) -> Result<(ClassificationProblem, LayeredParams)> {
    let gen = SyntheticClassification {
        n_samples: 24,
        n_features: 4,
        hidden: 3,
        lambda: rng.uniform_in(0.05, 1.0),
    };
    let (data, _) = gen.generate(act, rng)?;
    let problem = ClassificationProblem::new(data, act, gen.hidden, ConstraintSet::Free, ConstraintSet::Free)?;
    let body = Mat::new(4, 3, rng.normals(12))?.scaled(0.5);
    let head = Vector::new(rng.normals(3))?;
    Ok((problem, LayeredParams::new(body, head)?))
}

fn small_tdc(rng: &mut Rng) -> Result<(MdpContext, ValueFeatures)> {
    let mdp = TabularMdp::random(5, 2, rng.uniform_in(0.5, 0.95), rng)?;
    let psi = Mat::new(5, 3, rng.normals(15))?;
    let m = Mat::new(3, 3, rng.normals(9))?.scaled(0.7);
    let w = Vector::new(rng.normals(3))?;
    Ok((MdpContext::new(mdp)?, ValueFeatures::new(psi, Activation::Tanh, m, w)?))
}

type Pair = (Vec<f64>, Vec<f64>);

fn point(name: &str, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<Pair> {
    let h = cfg.fd_step;
    let flat = |m: Mat| m.into_vec();
    match name {
        "reg_grad_w" | "reg_subgrad_m" => {
            let act = cfg.regression_activation;
            let (p, at) = small_regression(act, rng)?;
            let d = &p.data;
            if name == "reg_grad_w" {
                let fd = fd_grad(|w: &Vector| d.loss(act, &LayeredParams::new(at.body.clone(), w.clone())?), &at.head, h)?;
                Ok((d.grad_w(act, &at)?.into_vec(), fd.into_vec()))
            } else {
                let fd = fd_grad_mat(|m: &Mat| d.loss(act, &LayeredParams::new(m.clone(), at.head.clone())?), &at.body, h)?;
                Ok((flat(d.subgrad_m(act, &at)?), flat(fd)))
            }
        }
        "clf_grad_w" | "clf_grad_m" => {
            let act = cfg.classification_activation;
            let (p, at) = small_classification(act, rng)?;
            let d = &p.data;
            if name == "clf_grad_w" {
                let fd = fd_grad(|w: &Vector| d.loss(act, &LayeredParams::new(at.body.clone(), w.clone())?), &at.head, h)?;
                Ok((d.grad_w(act, &at)?.into_vec(), fd.into_vec()))
            } else {
                let fd = fd_grad_mat(|m: &Mat| d.loss(act, &LayeredParams::new(m.clone(), at.head.clone())?), &at.body, h)?;
                Ok((flat(d.grad_m(act, &at)?), flat(fd)))
            }
        }
        "phi_subgrad_regression" => {
            let (p, at) = small_regression(Activation::Tanh, rng)?;
            let fd = fd_grad_mat(|m: &Mat| phi(&p, m, 1e-12), &at.body, h)?;
            Ok((flat(phi_subgrad(&p, &at.body, 1e-12)?), flat(fd)))
        }
        "phi_subgrad_classification" => {
            let (p, at) = small_classification(Activation::Tanh, rng)?;
            let fd = fd_grad_mat(|m: &Mat| phi(&p, m, 1e-12), &at.body, h)?;
            Ok((flat(phi_subgrad(&p, &at.body, 1e-12)?), flat(fd)))
        }
        "tdc_grad_m" | "tdc_grad_w" => {
            let (ctx, feat) = small_tdc(rng)?;
            let mu = ctx.mu_fixed_point(&feat)?;
            if name == "tdc_grad_m" {
                let fd = fd_grad_mat(
                    |m: &Mat| {
                        let mut f = feat.clone();
                        f.m = m.clone();
                        ctx.mspbe_bcb(&f)
                    },
                    &feat.m,
                    h,
                )?;
                Ok((flat(ctx.grad_m(&feat, &mu)?), flat(fd)))
            } else {
                let fd = fd_grad(
                    |w: &Vector| {
                        let mut f = feat.clone();
                        f.w = w.clone();
                        ctx.mspbe_bcb(&f)
                    },
                    &feat.w,
                    h,
                )?;
                Ok((ctx.grad_w(&feat, &mu)?.into_vec(), fd.into_vec()))
            }
        }
        other => Err(Error::InvalidArgument(format!("unknown gradient check {other:?}"))),
    }
}

pub fn run_check(name: &str, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let idx = CHECK_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient check {name:?}")))?;
    let mut rng = Rng::with_stream(cfg.seed, idx as u64);
    let corrupt = cfg.corrupt.as_deref() == Some(name);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.points {
        let (mut a, fd) = point(name, cfg, &mut rng)?;
        if corrupt {
            a.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
        }
        let e = rel_err(&a, &fd);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(CheckResult {
        name: name.to_string(),
        points: cfg.points,
        max_rel_err: worst,
        tol: cfg.tol,
        passed: worst <= cfg.tol,
    })
}

/// Every check in [`CHECK_NAMES`].
pub fn gradcheck_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.classification_activation.require_smooth("logistic classification")?;
    if let Some(c) = &cfg.corrupt {
        if !CHECK_NAMES.contains(&c.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown gradient check {c:?}")));
        }
    }
    let checks = CHECK_NAMES.iter().map(|n| run_check(n, cfg)).collect::<Result<_>>()?;
    Ok(GradcheckReport { config: cfg.clone(), checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckConfig {
        GradcheckConfig {
            points: 5,
            ..Default::default()
        }
    }

    #[test]
    fn quick_suite_passes() {
        let r = gradcheck_suite(&quick()).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
        assert_eq!(r.checks.len(), CHECK_NAMES.len());
    }

    #[test]
    fn corruption_fails_the_named_check_only() {
        let cfg = GradcheckConfig {
            corrupt: Some("clf_grad_m".into()),
            ..quick()
        };
        let r = gradcheck_suite(&cfg).unwrap();
        assert_eq!(r.failures(), vec!["clf_grad_m"]);
    }

    #[test]
    fn relu_classification_rejected() {
        let cfg = GradcheckConfig {
            classification_activation: Activation::Relu,
            ..quick()
        };
        assert!(matches!(gradcheck_suite(&cfg), Err(Error::ActivationNotAllowed { .. })));
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(run_check("nope", &quick()).is_err());
    }
}
