//! Binary logistic classification with a two-layer network, in mean form:
//! `f(M, w) = (1/N) Σ [softplus(zᵢ) − yᵢ zᵢ] + (λ/2)‖w‖²`, `z = φ(XM)w`.

use serde::{Deserialize, Serialize};

use super::{body_chain, features, sigmoid, softplus, Activation, ConstraintSet, GradientScaling, LayeredParams, MinibatchSample, Objective};
use crate::error::{Error, Result};
use crate::numcore::{max_eigenvalue_psd, Mat, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    pub x: Mat,
    pub y: Vector,
    pub lambda: f64,
}

impl ClassificationDataset {
    pub fn new(x: Mat, y: Vector, lambda: f64) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("classification dataset needs at least one row".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::dim("ClassificationDataset", format!("{} rows vs {} labels", x.rows(), y.len())));
        }
        if let Some(bad) = y.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("labels must be 0 or 1, found {bad}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::NotStronglyConvex(format!(
                "logistic head needs lambda > 0 for strong convexity, got {lambda}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { context: "classification features".into() });
        }
        Ok(Self { x, y, lambda })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    fn margins(&self, x: &Mat, act: Activation, p: &LayeredParams) -> Result<(Mat, Mat, Vector)> {
        if p.body.rows() != x.cols() || p.body.cols() != p.head.len() {
            return Err(Error::dim(
                "classification",
                format!("X has {} columns, body {}x{}, head {}", x.cols(), p.body.rows(), p.body.cols(), p.head.len()),
            ));
        }
        let (feat, deriv) = features(x, &p.body, act)?;
        let z = feat.matvec(&p.head)?;
        Ok((feat, deriv, z))
    }

    pub fn loss(&self, act: Activation, p: &LayeredParams) -> Result<f64> {
        act.require_smooth("logistic classification")?;
        let (_, _, z) = self.margins(&self.x, act, p)?;
        let n = self.n_samples() as f64;
        let data: f64 = z.as_slice().iter().zip(self.y.as_slice()).map(|(&zi, &yi)| softplus(zi) - yi * zi).sum();
        Ok(data / n + 0.5 * self.lambda * p.head.norm_sq())
    }

    pub fn grad_w(&self, act: Activation, p: &LayeredParams) -> Result<Vector> {
        act.require_smooth("logistic classification")?;
        self.grads_on(&self.x, &self.y, act, p).map(|(_, gw)| gw)
    }

    pub fn grad_m(&self, act: Activation, p: &LayeredParams) -> Result<Mat> {
        act.require_smooth("logistic classification")?;
        self.grads_on(&self.x, &self.y, act, p).map(|(gm, _)| gm)
    }

    /// Mean-form gradients over the rows of `x`, plus `λw` on the head.
    fn grads_on(&self, x: &Mat, y: &Vector, act: Activation, p: &LayeredParams) -> Result<(Mat, Vector)> {
        let (feat, deriv, z) = self.margins(x, act, p)?;
        let inv = 1.0 / x.rows() as f64;
        let resid = Vector::from_vec(z.as_slice().iter().zip(y.as_slice()).map(|(&zi, &yi)| sigmoid(zi) - yi).collect());
        let gm = body_chain(x, &resid, &p.head, &deriv)?.scaled(inv);
        let mut gw = feat.t_matvec(&resid)?.scaled(inv);
        gw.axpy(self.lambda, &p.head);
        Ok((gm, gw))
    }

    pub fn stoch_grads(&self, act: Activation, p: &LayeredParams, batch: &MinibatchSample) -> Result<(Mat, Vector)> {
        act.require_smooth("logistic classification")?;
        let xb = self.x.select_rows(batch.indices());
        let yb = Vector::from_vec(batch.indices().iter().map(|&i| self.y[i]).collect());
        self.grads_on(&xb, &yb, act, p)
    }
}

/// Teacher–student labels: standard normal X and teacher, `yᵢ ~
/// Bernoulli(σ(φ(xᵢᵀM*)w*))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassification {
    pub n_samples: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub lambda: f64,
}

impl Default for SyntheticClassification {
    fn default() -> Self {
        Self {
            n_samples: 128,
            n_features: 20,
            hidden: 10,
            lambda: 0.1,
        }
    }
}

impl SyntheticClassification {
    pub fn generate(&self, act: Activation, rng: &mut Rng) -> Result<(ClassificationDataset, LayeredParams)> {
        act.require_smooth("logistic classification")?;
        let x = Mat::new(self.n_samples, self.n_features, rng.normals(self.n_samples * self.n_features))?;
        let m_star = Mat::new(self.n_features, self.hidden, rng.normals(self.n_features * self.hidden))?;
        let w_star = Vector::new(rng.normals(self.hidden))?;
        let (feat, _) = features(&x, &m_star, act)?;
        let z = feat.matvec(&w_star)?;
        let y: Vec<f64> = z.as_slice().iter().map(|&zi| if rng.uniform() < sigmoid(zi) { 1.0 } else { 0.0 }).collect();
        let teacher = LayeredParams::new(m_star, w_star)?;
        Ok((ClassificationDataset::new(x, Vector::new(y)?, self.lambda)?, teacher))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationProblem {
    pub data: ClassificationDataset,
    pub act: Activation,
    pub hidden: usize,
    pub body_set: ConstraintSet,
    pub head_set: ConstraintSet,
}

impl ClassificationProblem {
    pub fn new(
        data: ClassificationDataset,
        act: Activation,
        hidden: usize,
        body_set: ConstraintSet,
        head_set: ConstraintSet,
    ) -> Result<Self> {
        act.require_smooth("logistic classification")?;
        body_set.validate()?;
        head_set.validate()?;
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        Ok(Self {
            data,
            act,
            hidden,
            body_set,
            head_set,
        })
    }
}

impl Objective for ClassificationProblem {
    fn id(&self) -> String {
        format!(
            "classification(N={}, m={}, n={}, act={}, lambda={})",
            self.data.n_samples(),
            self.data.x.cols(),
            self.hidden,
            self.act.name(),
            self.data.lambda
        )
    }

    fn body_shape(&self) -> (usize, usize) {
        (self.data.x.cols(), self.hidden)
    }

    fn body_set(&self) -> &ConstraintSet {
        &self.body_set
    }

    fn head_set(&self) -> &ConstraintSet {
        &self.head_set
    }

    fn loss(&self, p: &LayeredParams) -> Result<f64> {
        self.check_shapes(p)?;
        self.data.loss(self.act, p)
    }

    fn grad_head(&self, p: &LayeredParams) -> Result<Vector> {
        self.check_shapes(p)?;
        self.data.grad_w(self.act, p)
    }

    fn subgrad_body(&self, p: &LayeredParams) -> Result<Mat> {
        self.check_shapes(p)?;
        self.data.grad_m(self.act, p)
    }

    fn sample_grads(&self, p: &LayeredParams, batch_size: usize, rng: &mut Rng) -> Result<(Mat, Vector)> {
        self.check_shapes(p)?;
        let batch = MinibatchSample::draw(self.data.n_samples(), batch_size, rng)?;
        self.data.stoch_grads(self.act, p, &batch)
    }

    fn head_hessian(&self, p: &LayeredParams) -> Result<Mat> {
        let (feat, _, z) = self.data.margins(&self.data.x, self.act, p)?;
        let n = self.data.n_samples();
        let mut weighted = feat.clone();
        for i in 0..n {
            let s = sigmoid(z[i]);
            let c = s * (1.0 - s) / n as f64;
            for j in 0..weighted.cols() {
                weighted.set(i, j, weighted.get(i, j) * c);
            }
        }
        let mut h = feat.t_matmul(&weighted)?;
        h.add_diagonal(self.data.lambda);
        Ok(h)
    }

    /// `λmax(φᵀφ)/(4N) + λ`, since `s(1−s) ≤ 1/4`.
    fn head_smoothness(&self, body: &Mat) -> Result<f64> {
        let (feat, _) = features(&self.data.x, body, self.act)?;
        let gram = feat.t_matmul(&feat)?;
        let top = max_eigenvalue_psd(&gram, 1e-10, 10_000)? * 1.01;
        Ok(top / (4.0 * self.data.n_samples() as f64) + self.data.lambda)
    }

    fn head_strong_convexity_floor(&self) -> Option<f64> {
        Some(self.data.lambda)
    }

    fn scaling(&self) -> GradientScaling {
        GradientScaling::MeanForm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd_grad, fd_grad_mat};

    fn random_instance(seed: u64) -> (ClassificationDataset, LayeredParams) {
        let mut rng = Rng::new(seed);
        let x = Mat::new(9, 4, rng.normals(36)).unwrap();
        let y = Vector::from_vec((0..9).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect());
        let d = ClassificationDataset::new(x, y, 0.2).unwrap();
        let p = LayeredParams::new(Mat::new(4, 3, rng.normals(12)).unwrap(), Vector::new(rng.normals(3)).unwrap()).unwrap();
        (d, p)
    }

    #[test]
    fn zero_head_gives_log_two() {
        let x = Mat::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let d = ClassificationDataset::new(x, Vector::from_vec(vec![1.0, 0.0]), 1e-3).unwrap();
        let p = LayeredParams::new(Mat::scalar(0.7), Vector::zeros(1)).unwrap();
        assert!((d.loss(Activation::Tanh, &p).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturating_head_drives_loss_down() {
        let d = ClassificationDataset::new(Mat::scalar(1.0), Vector::from_vec(vec![1.0]), 1e-12).unwrap();
        let mut prev = f64::INFINITY;
        for w in [1.0, 5.0, 20.0, 60.0] {
            let l = d.loss(Activation::Identity, &LayeredParams::new(Mat::scalar(1.0), Vector::from_vec(vec![w])).unwrap()).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (d, p) = random_instance(seed);
            let act = Activation::Tanh;
            let gw = d.grad_w(act, &p).unwrap();
            let fd = fd_grad(|w: &Vector| d.loss(act, &LayeredParams::new(p.body.clone(), w.clone()).unwrap()), &p.head, 1e-5).unwrap();
            assert!(gw.dist(&fd) <= 1e-6 * gw.norm().max(1.0));
            let gm = d.grad_m(act, &p).unwrap();
            let fdm = fd_grad_mat(|m: &Mat| d.loss(act, &LayeredParams::new(m.clone(), p.head.clone()).unwrap()), &p.body, 1e-5).unwrap();
            assert!(gm.frob_dist(&fdm) <= 1e-6 * gm.frob_norm().max(1.0));
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let (d, p) = random_instance(7);
        let prob = ClassificationProblem::new(d.clone(), Activation::Sigmoid, 3, ConstraintSet::Free, ConstraintSet::Free).unwrap();
        let h = prob.head_hessian(&p).unwrap();
        for j in 0..3 {
            let mut up = p.clone();
            let mut dn = p.clone();
            up.head[j] += 1e-5;
            dn.head[j] -= 1e-5;
            let col = prob.grad_head(&up).unwrap().sub(&prob.grad_head(&dn).unwrap()).scaled(1.0 / 2e-5);
            for i in 0..3 {
                assert!((col[i] - h.get(i, j)).abs() < 1e-7);
            }
        }
        assert!(prob.head_smoothness(&p.body).unwrap() >= crate::numcore::max_eigenvalue_psd(&h, 1e-12, 10_000).unwrap());
    }

    #[test]
    fn full_batch_matches_exact() {
        let (d, p) = random_instance(2);
        let (gm, gw) = d.stoch_grads(Activation::Tanh, &p, &MinibatchSample::full(9)).unwrap();
        assert!(gm.frob_dist(&d.grad_m(Activation::Tanh, &p).unwrap()) < 1e-14);
        assert!(gw.dist(&d.grad_w(Activation::Tanh, &p).unwrap()) < 1e-14);
    }

    #[test]
    fn rejects_nonsmooth_and_bad_labels() {
        let (d, p) = random_instance(1);
        assert!(matches!(d.loss(Activation::Relu, &p), Err(Error::ActivationNotAllowed { .. })));
        assert!(matches!(
            ClassificationProblem::new(d, Activation::LeakyRelu { slope: 0.1 }, 3, ConstraintSet::Free, ConstraintSet::Free),
            Err(Error::ActivationNotAllowed { .. })
        ));
        assert!(ClassificationDataset::new(Mat::scalar(1.0), Vector::from_vec(vec![0.5]), 0.1).is_err());
        assert!(ClassificationDataset::new(Mat::scalar(1.0), Vector::from_vec(vec![1.0]), 0.0).is_err());
    }
}
