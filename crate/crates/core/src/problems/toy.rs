//! A scalar instance that is nonconvex jointly but has a strongly convex
//! reduced objective:
//! `f(M, w) = (Mw − 1)² + 0.1M²` on `[0.01, 10]²` with identity activation.

use serde::{Deserialize, Serialize};

use super::{ConstraintSet, GradientScaling, LayeredParams, Objective};
use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Vector};

pub const TOY_LO: f64 = 0.01;
pub const TOY_HI: f64 = 10.0;

const BOX_TOL: f64 = 1e-12;

fn check_box(v: f64, what: &str) -> Result<()> {
    if v.is_finite() && (TOY_LO - BOX_TOL..=TOY_HI + BOX_TOL).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} = {v} is outside [{TOY_LO}, {TOY_HI}]")))
    }
}

fn f_raw(m: f64, w: f64) -> f64 {
    let r = m * w - 1.0;
    r * r + 0.1 * m * m
}

fn best_head(m: f64) -> f64 {
    (1.0 / m).clamp(TOY_LO, TOY_HI)
}

pub fn toy_f(m: f64, w: f64) -> Result<f64> {
    check_box(m, "M")?;
    check_box(w, "w")?;
    Ok(f_raw(m, w))
}

/// `Φ(M) = (M·min(10, 1/M) − 1)² + 0.1M²`.
pub fn toy_phi(m: f64) -> Result<f64> {
    check_box(m, "M")?;
    Ok(f_raw(m, best_head(m)))
}

/// `∇²f(M, w) = [[2w² + 0.2, 4Mw − 2], [4Mw − 2, 2M²]]`.
pub fn toy_hessian(m: f64, w: f64) -> [[f64; 2]; 2] {
    let off = 4.0 * m * w - 2.0;
    [[2.0 * w * w + 0.2, off], [off, 2.0 * m * m]]
}

/// Global minimizer of Φ on `[0.01, 10]`: the stationary point
/// `20/200.2` of the branch `(10M − 1)² + 0.1M²`, which lies left of the
/// kink at `M = 0.1`.
pub fn toy_phi_minimizer() -> f64 {
    20.0 / 200.2
}

/// The toy objective with a stochastic oracle that adds independent
/// `N(0, σ²/b)` noise to each exact partial, `b` being the batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub noise_std: f64,
    #[serde(skip, default = "toy_set")]
    set: ConstraintSet,
}

fn toy_set() -> ConstraintSet {
    ConstraintSet::Box { lo: TOY_LO, hi: TOY_HI }
}

impl Default for ToyProblem {
    fn default() -> Self {
        Self::new(1.0).expect("default noise is valid")
    }
}

impl ToyProblem {
    pub fn new(noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!("noise std must be finite and >= 0, got {noise_std}")));
        }
        Ok(Self { noise_std, set: toy_set() })
    }

    pub fn params(m: f64, w: f64) -> LayeredParams {
        LayeredParams {
            body: Mat::scalar(m),
            head: Vector::from_vec(vec![w]),
        }
    }

    fn scalars(p: &LayeredParams) -> (f64, f64) {
        (p.body.get(0, 0), p.head[0])
    }

    fn partials(m: f64, w: f64) -> (f64, f64) {
        let r = m * w - 1.0;
        (2.0 * r * w + 0.2 * m, 2.0 * r * m)
    }
}

impl Objective for ToyProblem {
    fn id(&self) -> String {
        format!("toy(sigma={})", self.noise_std)
    }

    fn body_shape(&self) -> (usize, usize) {
        (1, 1)
    }

    fn body_set(&self) -> &ConstraintSet {
        &self.set
    }

    fn head_set(&self) -> &ConstraintSet {
        &self.set
    }

    /// The polynomial itself, defined everywhere so that difference
    /// stencils may straddle the box.
    fn loss(&self, p: &LayeredParams) -> Result<f64> {
        self.check_shapes(p)?;
        let (m, w) = Self::scalars(p);
        Ok(f_raw(m, w))
    }

    fn grad_head(&self, p: &LayeredParams) -> Result<Vector> {
        self.check_shapes(p)?;
        let (m, w) = Self::scalars(p);
        Ok(Vector::from_vec(vec![Self::partials(m, w).1]))
    }

    fn subgrad_body(&self, p: &LayeredParams) -> Result<Mat> {
        self.check_shapes(p)?;
        let (m, w) = Self::scalars(p);
        Ok(Mat::scalar(Self::partials(m, w).0))
    }

    fn sample_grads(&self, p: &LayeredParams, batch_size: usize, rng: &mut Rng) -> Result<(Mat, Vector)> {
        self.check_shapes(p)?;
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let (m, w) = Self::scalars(p);
        let (gm, gw) = Self::partials(m, w);
        let s = self.noise_std / (batch_size as f64).sqrt();
        let nm = rng.normal();
        let nw = rng.normal();
        Ok((Mat::scalar(gm + s * nm), Vector::from_vec(vec![gw + s * nw])))
    }

    fn head_hessian(&self, p: &LayeredParams) -> Result<Mat> {
        let m = p.body.get(0, 0);
        Ok(Mat::scalar(2.0 * m * m))
    }

    fn head_smoothness(&self, body: &Mat) -> Result<f64> {
        let m = body.get(0, 0);
        Ok(2.0 * m * m)
    }

    fn closed_form_best_response(&self, body: &Mat) -> Option<Result<Vector>> {
        let m = body.get(0, 0);
        Some(check_box(m, "M").map(|_| Vector::from_vec(vec![best_head(m)])))
    }

    /// `2M²` at the smallest feasible `M`.
    fn head_strong_convexity_floor(&self) -> Option<f64> {
        Some(2.0 * TOY_LO * TOY_LO)
    }

    fn scaling(&self) -> GradientScaling {
        GradientScaling::AdditiveNoise
    }

    fn gradient_variance(&self, p: &LayeredParams, batch_size: usize, _draws: usize, _rng: &mut Rng) -> Result<(f64, f64)> {
        self.check_shapes(p)?;
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let v = self.noise_std * self.noise_std / batch_size as f64;
        Ok((v, v))
    }
}
