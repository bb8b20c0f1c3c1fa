//! A deterministic convex test objective with an explicit reduction:
//! `f(M, w) = ½‖w − c − Mᵀa‖² + (κ/2)‖M‖²`.
//!
//! The unconstrained best response is `c + Mᵀa` and, whenever it is
//! feasible, `Φ(M) = (κ/2)‖M‖²`.

use serde::{Deserialize, Serialize};

use super::{ConstraintSet, GradientScaling, LayeredParams, Objective};
use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    /// `a`, length m.
    pub anchor: Vector,
    /// `c`, length n.
    pub center: Vector,
    pub body_weight: f64,
    pub body_set: ConstraintSet,
    pub head_set: ConstraintSet,
}

impl QuadraticObjective {
    pub fn new(anchor: Vector, center: Vector, body_weight: f64, body_set: ConstraintSet, head_set: ConstraintSet) -> Result<Self> {
        body_set.validate()?;
        head_set.validate()?;
        if anchor.is_empty() || center.is_empty() {
            return Err(Error::InvalidArgument("quadratic objective needs nonempty anchor and center".into()));
        }
        if !(body_weight >= 0.0) || !body_weight.is_finite() {
            return Err(Error::InvalidArgument(format!("body weight must be >= 0, got {body_weight}")));
        }
        Ok(Self {
            anchor,
            center,
            body_weight,
            body_set,
            head_set,
        })
    }

    /// `f = ½‖w − c‖²` with a 1×n body that does not enter the loss.
    pub fn head_only(center: Vector, head_set: ConstraintSet) -> Result<Self> {
        Self::new(Vector::zeros(1), center, 0.0, ConstraintSet::Free, head_set)
    }

    fn target(&self, body: &Mat) -> Result<Vector> {
        Ok(self.center.add(&body.t_matvec(&self.anchor)?))
    }
}

impl Objective for QuadraticObjective {
    fn id(&self) -> String {
        format!("quadratic(m={}, n={}, kappa={})", self.anchor.len(), self.center.len(), self.body_weight)
    }

    fn body_shape(&self) -> (usize, usize) {
        (self.anchor.len(), self.center.len())
    }

    fn body_set(&self) -> &ConstraintSet {
        &self.body_set
    }

    fn head_set(&self) -> &ConstraintSet {
        &self.head_set
    }

    fn loss(&self, p: &LayeredParams) -> Result<f64> {
        self.check_shapes(p)?;
        let r = p.head.sub(&self.target(&p.body)?);
        Ok(0.5 * r.norm_sq() + 0.5 * self.body_weight * p.body.frob_norm_sq())
    }

    fn grad_head(&self, p: &LayeredParams) -> Result<Vector> {
        self.check_shapes(p)?;
        Ok(p.head.sub(&self.target(&p.body)?))
    }

    fn subgrad_body(&self, p: &LayeredParams) -> Result<Mat> {
        self.check_shapes(p)?;
        let r = p.head.sub(&self.target(&p.body)?);
        let mut g = self.anchor.outer(&r).scaled(-1.0);
        g.axpy(self.body_weight, &p.body);
        Ok(g)
    }

    fn sample_grads(&self, p: &LayeredParams, _batch_size: usize, _rng: &mut Rng) -> Result<(Mat, Vector)> {
        Ok((self.subgrad_body(p)?, self.grad_head(p)?))
    }

    fn head_hessian(&self, _p: &LayeredParams) -> Result<Mat> {
        Ok(Mat::identity(self.center.len()))
    }

    fn head_smoothness(&self, _body: &Mat) -> Result<f64> {
        Ok(1.0)
    }

    fn closed_form_best_response(&self, body: &Mat) -> Option<Result<Vector>> {
        Some(self.target(body).map(|t| self.head_set.project_vec(&t)))
    }

    fn head_strong_convexity_floor(&self) -> Option<f64> {
        Some(1.0)
    }

    fn scaling(&self) -> GradientScaling {
        GradientScaling::Exact
    }

    fn gradient_variance(&self, p: &LayeredParams, _batch_size: usize, _draws: usize, _rng: &mut Rng) -> Result<(f64, f64)> {
        self.check_shapes(p)?;
        Ok((0.0, 0.0))
    }
}
