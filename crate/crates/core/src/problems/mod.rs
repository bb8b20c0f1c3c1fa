//! Concrete layered objectives `f(M, w)` and the interface the optimizer,
//! the Stackelberg reduction and the landscape tools consume.

mod activation;
mod classification;
mod constants;
mod quadratic;
mod regression;
mod sets;
mod toy;

use serde::{Deserialize, Serialize};

pub use activation::{sigmoid, softplus, Activation};
pub use classification::{ClassificationDataset, ClassificationProblem, SyntheticClassification};
pub use constants::{estimate_constants, EstimateOptions, ProblemConstants};
pub use quadratic::QuadraticObjective;
pub use regression::{RegressionDataset, RegressionProblem, SyntheticRegression};
pub use sets::ConstraintSet;
pub use toy::{toy_f, toy_hessian, toy_phi, toy_phi_minimizer, ToyProblem, TOY_HI, TOY_LO};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Vector};

/// Network parameters split into the body `M` (m×n) and the head `w` (n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredParams {
    pub body: Mat,
    pub head: Vector,
}

impl LayeredParams {
    pub fn new(body: Mat, head: Vector) -> Result<Self> {
        if body.cols() != head.len() {
            return Err(Error::dim(
                "LayeredParams::new",
                format!("body is {}x{} but head has length {}", body.rows(), body.cols(), head.len()),
            ));
        }
        Ok(Self { body, head })
    }

    pub fn is_finite(&self) -> bool {
        self.body.is_finite() && self.head.is_finite()
    }
}

/// Distinct row indices drawn uniformly without replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinibatchSample {
    indices: Vec<usize>,
}

impl MinibatchSample {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("minibatch is empty".into()));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "minibatch index {i} is out of range or repeated (N = {n})"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn draw(n: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || size > n {
            return Err(Error::InvalidArgument(format!("batch size {size} with N = {n}")));
        }
        Ok(Self {
            indices: rng.sample_distinct(n, size),
        })
    }

    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// How stochastic gradients relate to the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScaling {
    /// `N/|B|` times the batch sum: estimates a sum-over-samples objective.
    SumForm,
    /// `1/|B|` times the batch sum: estimates a mean-over-samples objective.
    MeanForm,
    /// Exact gradient plus independent Gaussian noise.
    AdditiveNoise,
    /// Deterministic; stochastic and full gradients coincide.
    Exact,
}

impl GradientScaling {
    pub fn describe(&self) -> &'static str {
        match self {
            GradientScaling::SumForm => "sum-form: minibatch gradients scaled by N/|B| estimate the sum over samples",
            GradientScaling::MeanForm => "mean-form: minibatch gradients scaled by 1/|B| estimate the sample mean",
            GradientScaling::AdditiveNoise => "exact gradients plus i.i.d. Gaussian noise",
            GradientScaling::Exact => "deterministic gradients",
        }
    }
}

/// Rank-one direction `dir·e_colᵀ` spanning part of the body subdifferential
/// at a kink; the admissible coefficients are `θ ∈ [lo, hi]` relative to the
/// fixed selection returned by `subgrad_body`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkGenerator {
    pub col: usize,
    pub dir: Vector,
    pub lo: f64,
    pub hi: f64,
}

/// A layered objective `f(M, w) = E[ℓ(M, w, ξ)]` with feasible sets for both
/// blocks, full-batch (sub)gradients and a stochastic sampler.
pub trait Objective: Send + Sync {
    fn id(&self) -> String;

    /// `(m, n)`: the body is m×n and the head has length n.
    fn body_shape(&self) -> (usize, usize);

    fn body_set(&self) -> &ConstraintSet;

    fn head_set(&self) -> &ConstraintSet;

    fn loss(&self, p: &LayeredParams) -> Result<f64>;

    fn grad_head(&self, p: &LayeredParams) -> Result<Vector>;

    /// A Clarke subgradient in `M` under the activation's fixed selection.
    fn subgrad_body(&self, p: &LayeredParams) -> Result<Mat>;

    /// One draw of `(G_M, ∇_w ℓ)` at `p`. Both blocks share the sample.
    fn sample_grads(&self, p: &LayeredParams, batch_size: usize, rng: &mut Rng) -> Result<(Mat, Vector)>;

    /// `∇²_w f(M, w)`.
    fn head_hessian(&self, p: &LayeredParams) -> Result<Mat>;

    /// Upper bound on the smoothness of `f(M, ·)` over the head set.
    fn head_smoothness(&self, body: &Mat) -> Result<f64>;

    /// Exact unconstrained-or-projected best response when one is available
    /// in closed form. The caller checks membership in the head set.
    fn closed_form_best_response(&self, _body: &Mat) -> Option<Result<Vector>> {
        None
    }

    /// Analytic lower bound on the strong convexity of `f(M, ·)`, if known.
    fn head_strong_convexity_floor(&self) -> Option<f64> {
        None
    }

    fn scaling(&self) -> GradientScaling;

    /// Generators of `∂_M f` from every kink whose hyperplane lies within
    /// distance `radius` of `p.body`, so that `subgrad_body(p) + Σ θ_k J_k`
    /// covers the subgradients of nearby points. `None` for objectives
    /// without exposed kinks.
    fn kink_generators(&self, _p: &LayeredParams, _radius: f64) -> Result<Option<Vec<KinkGenerator>>> {
        Ok(None)
    }

    /// `(E‖G_M − ∇_M f‖², E‖∇_w ℓ − ∇_w f‖²)` at `p` for the given batch size.
    /// The default estimates it from `draws` samples.
    fn gradient_variance(
        &self,
        p: &LayeredParams,
        batch_size: usize,
        draws: usize,
        rng: &mut Rng,
    ) -> Result<(f64, f64)> {
        let gm = self.subgrad_body(p)?;
        let gw = self.grad_head(p)?;
        let (mut vm, mut vw) = (0.0, 0.0);
        for _ in 0..draws {
            let (sm, sw) = self.sample_grads(p, batch_size, rng)?;
            vm += sm.sub(&gm).frob_norm_sq();
            vw += sw.sub(&gw).norm_sq();
        }
        let d = draws.max(1) as f64;
        Ok((vm / d, vw / d))
    }

    fn check_shapes(&self, p: &LayeredParams) -> Result<()> {
        let (m, n) = self.body_shape();
        if p.body.shape() != (m, n) || p.head.len() != n {
            return Err(Error::dim(
                "objective",
                format!(
                    "expected body {m}x{n} and head {n}, got body {}x{} and head {}",
                    p.body.rows(),
                    p.body.cols(),
                    p.head.len()
                ),
            ));
        }
        Ok(())
    }
}

/// `φ(XM)` and `φ′(XM)` for a batch of rows.
pub(crate) fn features(x: &Mat, body: &Mat, act: Activation) -> Result<(Mat, Mat)> {
    let z = x.matmul(body)?;
    Ok((z.map(|a| act.apply(a)), z.map(|a| act.derivative(a))))
}

/// `Xᵀ((c wᵀ) ⊙ D)` where `c` has one entry per row of X.
pub(crate) fn body_chain(x: &Mat, coef: &Vector, head: &Vector, deriv: &Mat) -> Result<Mat> {
    let (rows, n) = deriv.shape();
    let mut inner = Mat::zeros(rows, n);
    for i in 0..rows {
        let ci = coef[i];
        for j in 0..n {
            inner.set(i, j, ci * head[j] * deriv.get(i, j));
        }
    }
    x.t_matmul(&inner)
}
