//! Squared-loss regression with a two-layer network:
//! `f(M, w) = ‖φ(XM)w − Y‖² + (λ/2)‖w‖²`.

use serde::{Deserialize, Serialize};

use super::{KinkGenerator, body_chain, features, Activation, ConstraintSet, GradientScaling, LayeredParams, MinibatchSample, Objective};
use crate::error::{Error, Result};
use crate::numcore::{Cholesky, Mat, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub x: Mat,
    pub y: Vector,
    pub lambda: f64,
}

impl RegressionDataset {
    pub fn new(x: Mat, y: Vector, lambda: f64) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("regression dataset needs at least one row".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::dim("RegressionDataset", format!("{} rows vs {} labels", x.rows(), y.len())));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("regularization weight must be >= 0, got {lambda}")));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite { context: "regression dataset".into() });
        }
        Ok(Self { x, y, lambda })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    fn check(&self, p: &LayeredParams) -> Result<()> {
        if p.body.rows() != self.x.cols() || p.body.cols() != p.head.len() {
            return Err(Error::dim(
                "regression",
                format!(
                    "X is {}x{}, body {}x{}, head {}",
                    self.x.rows(),
                    self.x.cols(),
                    p.body.rows(),
                    p.body.cols(),
                    p.head.len()
                ),
            ));
        }
        Ok(())
    }

    /// `‖φ(XM)w − Y‖² + (λ/2)‖w‖²`
    pub fn loss(&self, act: Activation, p: &LayeredParams) -> Result<f64> {
        self.check(p)?;
        let (feat, _) = features(&self.x, &p.body, act)?;
        let r = feat.matvec(&p.head)?.sub(&self.y);
        Ok(r.norm_sq() + 0.5 * self.lambda * p.head.norm_sq())
    }

    /// `2φ(XM)ᵀ(φ(XM)w − Y) + λw`
    pub fn grad_w(&self, act: Activation, p: &LayeredParams) -> Result<Vector> {
        self.check(p)?;
        let (feat, _) = features(&self.x, &p.body, act)?;
        let r = feat.matvec(&p.head)?.sub(&self.y);
        let mut g = feat.t_matvec(&r)?.scaled(2.0);
        g.axpy(self.lambda, &p.head);
        Ok(g)
    }

    /// `2Xᵀ(((φ(XM)w − Y)wᵀ) ⊙ φ′(XM))`
    pub fn subgrad_m(&self, act: Activation, p: &LayeredParams) -> Result<Mat> {
        self.check(p)?;
        let (feat, deriv) = features(&self.x, &p.body, act)?;
        let r = feat.matvec(&p.head)?.sub(&self.y);
        Ok(body_chain(&self.x, &r, &p.head, &deriv)?.scaled(2.0))
    }

    /// Minibatch estimates scaled by `2N/|B|`; the regularizer gradient `λw`
    /// is deterministic and added whole, so the full batch reproduces the
    /// exact gradients.
    pub fn stoch_grads(&self, act: Activation, p: &LayeredParams, batch: &MinibatchSample) -> Result<(Mat, Vector)> {
        self.check(p)?;
        if batch.size() == 0 {
            return Err(Error::InvalidArgument("minibatch is empty".into()));
        }
        let xb = self.x.select_rows(batch.indices());
        let yb = Vector::from_vec(batch.indices().iter().map(|&i| self.y[i]).collect());
        let (feat, deriv) = features(&xb, &p.body, act)?;
        let r = feat.matvec(&p.head)?.sub(&yb);
        let scale = 2.0 * self.n_samples() as f64 / batch.size() as f64;
        let gm = body_chain(&xb, &r, &p.head, &deriv)?.scaled(scale);
        let mut gw = feat.t_matvec(&r)?.scaled(scale);
        gw.axpy(self.lambda, &p.head);
        Ok((gm, gw))
    }

    /// Per-sample contributions whose sum is the data part of the full
    /// gradients.
    fn per_sample(&self, act: Activation, p: &LayeredParams) -> Result<(Vec<Mat>, Vec<Vector>)> {
        let (feat, deriv) = features(&self.x, &p.body, act)?;
        let r = feat.matvec(&p.head)?.sub(&self.y);
        let n = p.head.len();
        let mut gms = Vec::with_capacity(self.n_samples());
        let mut gws = Vec::with_capacity(self.n_samples());
        for i in 0..self.n_samples() {
            let coef = Vector::from_vec((0..n).map(|j| 2.0 * r[i] * p.head[j] * deriv.get(i, j)).collect());
            gms.push(self.x.row_vector(i).outer(&coef));
            gws.push(feat.row_vector(i).scaled(2.0 * r[i]));
        }
        Ok((gms, gws))
    }
}

/// Synthetic teacher–student regression data: rows of X, the teacher body
/// and head are i.i.d. standard normal, and `yᵢ = φ(xᵢᵀM*)w* + εᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegression {
    pub n_samples: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub noise_std: f64,
    pub lambda: f64,
}

impl Default for SyntheticRegression {
    fn default() -> Self {
        Self {
            n_samples: 128,
            n_features: 20,
            hidden: 10,
            noise_std: 1.0,
            lambda: 0.1,
        }
    }
}

impl SyntheticRegression {
    /// Returns the dataset and the teacher parameters.
    pub fn generate(&self, act: Activation, rng: &mut Rng) -> Result<(RegressionDataset, LayeredParams)> {
        let x = Mat::new(self.n_samples, self.n_features, rng.normals(self.n_samples * self.n_features))?;
        let m_star = Mat::new(self.n_features, self.hidden, rng.normals(self.n_features * self.hidden))?;
        let w_star = Vector::new(rng.normals(self.hidden))?;
        let (feat, _) = features(&x, &m_star, act)?;
        let mut y = feat.matvec(&w_star)?;
        for v in y.as_mut_slice() {
            *v += self.noise_std * rng.normal();
        }
        let teacher = LayeredParams::new(m_star, w_star)?;
        Ok((RegressionDataset::new(x, y, self.lambda)?, teacher))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionProblem {
    pub data: RegressionDataset,
    pub act: Activation,
    pub hidden: usize,
    pub body_set: ConstraintSet,
    pub head_set: ConstraintSet,
}

impl RegressionProblem {
    pub fn new(
        data: RegressionDataset,
        act: Activation,
        hidden: usize,
        body_set: ConstraintSet,
        head_set: ConstraintSet,
    ) -> Result<Self> {
        body_set.validate()?;
        head_set.validate()?;
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if data.lambda == 0.0 && data.n_samples() < hidden {
            return Err(Error::NotStronglyConvex(format!(
                "N = {} < n = {} with zero regularization: the head problem is not strongly convex; set lambda > 0",
                data.n_samples(),
                hidden
            )));
        }
        Ok(Self {
            data,
            act,
            hidden,
            body_set,
            head_set,
        })
    }

    /// Solves `(φᵀφ + (λ/2)I) w = φᵀY`, the stationarity condition of the
    /// loss above.
    pub fn ridge_solution(&self, body: &Mat) -> Result<Vector> {
        let (feat, _) = features(&self.data.x, body, self.act)?;
        let mut gram = feat.t_matmul(&feat)?;
        gram.add_diagonal(0.5 * self.data.lambda);
        let rhs = feat.t_matvec(&self.data.y)?;
        let chol = Cholesky::factor(&gram).map_err(|e| {
            Error::NotStronglyConvex(format!("feature Gram matrix is singular and lambda = {} ({e})", self.data.lambda))
        })?;
        chol.solve(&rhs)
    }
}

impl Objective for RegressionProblem {
    fn id(&self) -> String {
        format!(
            "regression(N={}, m={}, n={}, act={}, lambda={})",
            self.data.n_samples(),
            self.data.n_features(),
            self.hidden,
            self.act.name(),
            self.data.lambda
        )
    }

    fn body_shape(&self) -> (usize, usize) {
        (self.data.n_features(), self.hidden)
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
        self.data.subgrad_m(self.act, p)
    }

    fn sample_grads(&self, p: &LayeredParams, batch_size: usize, rng: &mut Rng) -> Result<(Mat, Vector)> {
        self.check_shapes(p)?;
        let batch = MinibatchSample::draw(self.data.n_samples(), batch_size, rng)?;
        self.data.stoch_grads(self.act, p, &batch)
    }

    fn head_hessian(&self, p: &LayeredParams) -> Result<Mat> {
        let (feat, _) = features(&self.data.x, &p.body, self.act)?;
        let mut h = feat.t_matmul(&feat)?.scaled(2.0);
        h.add_diagonal(self.data.lambda);
        Ok(h)
    }

    fn head_smoothness(&self, body: &Mat) -> Result<f64> {
        let (feat, _) = features(&self.data.x, body, self.act)?;
        let gram = feat.t_matmul(&feat)?;
        Ok(2.0 * crate::numcore::max_eigenvalue_psd(&gram, 1e-10, 10_000)? * 1.01 + self.data.lambda)
    }

    fn closed_form_best_response(&self, body: &Mat) -> Option<Result<Vector>> {
        Some(self.ridge_solution(body))
    }

    fn head_strong_convexity_floor(&self) -> Option<f64> {
        (self.data.lambda > 0.0).then_some(self.data.lambda)
    }

    fn scaling(&self) -> GradientScaling {
        GradientScaling::SumForm
    }

    /// Entry `(i, j)` of `XM` is a kink when `|(XM)ᵢⱼ| ≤ radius·‖xᵢ‖`; its
    /// generator is `2rᵢwⱼxᵢ` in column `j`.
    fn kink_generators(&self, p: &LayeredParams, radius: f64) -> Result<Option<Vec<KinkGenerator>>> {
        let Some((lo, hi)) = self.act.kink_range() else { return Ok(None) };
        self.check_shapes(p)?;
        let x = &self.data.x;
        let z = x.matmul(&p.body)?;
        let r = z.map(|a| self.act.apply(a)).matvec(&p.head)?.sub(&self.data.y);
        let mut gens = Vec::new();
        for i in 0..x.rows() {
            let xi = x.row_vector(i);
            let reach = radius * xi.norm();
            for j in 0..p.head.len() {
                let zij = z.get(i, j);
                if zij.abs() > reach {
                    continue;
                }
                let coef = 2.0 * r[i] * p.head[j];
                if coef == 0.0 {
                    continue;
                }
                let sel = self.act.derivative(zij);
                gens.push(KinkGenerator {
                    col: j,
                    dir: xi.scaled(coef),
                    lo: lo - sel,
                    hi: hi - sel,
                });
            }
        }
        Ok(Some(gens))
    }

    /// Exact variance of the `N/|B|`-scaled estimator under sampling without
    /// replacement: `N²·(S²/B)·(1 − B/N)` with `S²` the unbiased per-sample
    /// spread.
    fn gradient_variance(&self, p: &LayeredParams, batch_size: usize, _draws: usize, _rng: &mut Rng) -> Result<(f64, f64)> {
        self.check_shapes(p)?;
        let n = self.data.n_samples();
        if batch_size == 0 || batch_size > n {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} with N = {n}")));
        }
        if n == 1 {
            return Ok((0.0, 0.0));
        }
        let (gms, gws) = self.data.per_sample(self.act, p)?;
        let (r, c) = gms[0].shape();
        let mut mean_m = Mat::zeros(r, c);
        let mut mean_w = Vector::zeros(gws[0].len());
        for (gm, gw) in gms.iter().zip(&gws) {
            mean_m.axpy(1.0 / n as f64, gm);
            mean_w.axpy(1.0 / n as f64, gw);
        }
        let s2_m = gms.iter().map(|g| g.sub(&mean_m).frob_norm_sq()).sum::<f64>() / (n - 1) as f64;
        let s2_w = gws.iter().map(|g| g.sub(&mean_w).norm_sq()).sum::<f64>() / (n - 1) as f64;
        let nf = n as f64;
        let b = batch_size as f64;
        let factor = nf * nf / b * (1.0 - b / nf);
        Ok((factor * s2_m, factor * s2_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd_grad, fd_grad_mat};

    fn scalar_data(lambda: f64) -> RegressionDataset {
        RegressionDataset::new(Mat::scalar(1.0), Vector::from_vec(vec![1.0]), lambda).unwrap()
    }

    fn scalar_params(m: f64, w: f64) -> LayeredParams {
        LayeredParams::new(Mat::scalar(m), Vector::from_vec(vec![w])).unwrap()
    }

    #[test]
    fn hand_evaluated_losses() {
        let id = Activation::Identity;
        assert_eq!(scalar_data(0.0).loss(id, &scalar_params(1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(scalar_data(0.0).loss(id, &scalar_params(2.0, 1.0)).unwrap(), 1.0);
        assert!((scalar_data(0.1).loss(id, &scalar_params(1.0, 2.0)).unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn kink_generators_span_one_sided_derivatives() {
        let d = scalar_data(0.0);
        let p = RegressionProblem::new(d, Activation::Relu, 1, ConstraintSet::Free, ConstraintSet::Free).unwrap();
        let at = scalar_params(0.0, 1.0);
        let g = p.subgrad_body(&at).unwrap().get(0, 0);
        let gens = p.kink_generators(&at, 1e-9).unwrap().unwrap();
        assert_eq!(gens.len(), 1);
        let k = &gens[0];
        let ends = [g + k.lo * k.dir[0], g + k.hi * k.dir[0]];
        // (relu(M) − 1)²: slope −2 from the right, 0 from the left.
        assert!(ends.contains(&-2.0) && ends.contains(&0.0), "{ends:?}");
        assert!(p.kink_generators(&scalar_params(0.5, 1.0), 1e-3).unwrap().unwrap().is_empty());
        let smooth = RegressionProblem::new(scalar_data(0.0), Activation::Tanh, 1, ConstraintSet::Free, ConstraintSet::Free).unwrap();
        assert!(smooth.kink_generators(&at, 1.0).unwrap().is_none());
    }

    #[test]
    fn hand_evaluated_gradients() {
        let id = Activation::Identity;
        let d = scalar_data(0.0);
        assert_eq!(d.grad_w(id, &scalar_params(1.0, 1.0)).unwrap()[0], 0.0);
        assert_eq!(d.grad_w(id, &scalar_params(2.0, 1.0)).unwrap()[0], 4.0);
        assert_eq!(d.subgrad_m(id, &scalar_params(2.0, 1.0)).unwrap().get(0, 0), 2.0);
        let zero_head = scalar_params(2.0, 0.0);
        assert_eq!(d.subgrad_m(id, &zero_head).unwrap().get(0, 0), 0.0);
    }

    fn random_instance(seed: u64, act: Activation, n: usize) -> (RegressionDataset, LayeredParams) {
        let mut rng = Rng::new(seed);
        let spec = SyntheticRegression {
            n_samples: n,
            n_features: 4,
            hidden: 3,
            noise_std: 0.5,
            lambda: 0.3,
        };
        let (data, _) = spec.generate(act, &mut rng).unwrap();
        let body = Mat::new(4, 3, rng.normals(12)).unwrap().scaled(0.5);
        let head = Vector::new(rng.normals(3)).unwrap();
        (data, LayeredParams::new(body, head).unwrap())
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let act = Activation::Tanh;
            let (d, p) = random_instance(seed, act, 7);
            let gw = d.grad_w(act, &p).unwrap();
            let fd = fd_grad(
                |w: &Vector| d.loss(act, &LayeredParams::new(p.body.clone(), w.clone()).unwrap()),
                &p.head,
                1e-5,
            )
            .unwrap();
            assert!(gw.dist(&fd) <= 1e-6 * gw.norm().max(1.0));
            let gm = d.subgrad_m(act, &p).unwrap();
            let fdm = fd_grad_mat(
                |m: &Mat| d.loss(act, &LayeredParams::new(m.clone(), p.head.clone()).unwrap()),
                &p.body,
                1e-5,
            )
            .unwrap();
            assert!(gm.frob_dist(&fdm) <= 1e-6 * gm.frob_norm().max(1.0));
        }
    }

    #[test]
    fn relu_on_positive_branch_matches_identity() {
        // All preactivations positive: relu and identity coincide locally.
        let x = Mat::from_rows(&[vec![1.0, 0.5], vec![0.3, 2.0], vec![1.2, 0.1]]).unwrap();
        let d = RegressionDataset::new(x, Vector::from_vec(vec![1.0, -0.5, 2.0]), 0.1).unwrap();
        let p = LayeredParams::new(Mat::from_rows(&[vec![1.0, 0.2], vec![0.4, 0.9]]).unwrap(), Vector::from_vec(vec![0.7, -1.1])).unwrap();
        let relu = d.subgrad_m(Activation::Relu, &p).unwrap();
        let ident = d.subgrad_m(Activation::Identity, &p).unwrap();
        assert!(relu.frob_dist(&ident) < 1e-14);
    }

    #[test]
    fn full_batch_is_exact_and_empty_batch_rejected() {
        let act = Activation::Relu;
        let (d, p) = random_instance(3, act, 6);
        let (gm, gw) = d.stoch_grads(act, &p, &MinibatchSample::full(6)).unwrap();
        assert!(gm.frob_dist(&d.subgrad_m(act, &p).unwrap()) < 1e-12);
        assert!(gw.dist(&d.grad_w(act, &p).unwrap()) < 1e-12);
        assert!(MinibatchSample::new(vec![], 6).is_err());
        assert!(MinibatchSample::new(vec![1, 1], 6).is_err());
    }

    #[test]
    fn singleton_batches_average_to_full() {
        let act = Activation::Relu;
        let (d, p) = random_instance(4, act, 2);
        let full = d.subgrad_m(act, &p).unwrap();
        let mut mean = Mat::zeros(4, 3);
        for i in 0..2 {
            let (gm, _) = d.stoch_grads(act, &p, &MinibatchSample::new(vec![i], 2).unwrap()).unwrap();
            mean.axpy(0.5, &gm);
        }
        assert!(mean.frob_dist(&full) <= 1e-12 * full.frob_norm().max(1.0));
    }

    #[test]
    fn exact_variance_matches_enumeration() {
        let act = Activation::Relu;
        let (d, p) = random_instance(5, act, 5);
        let prob = RegressionProblem::new(d.clone(), act, 3, ConstraintSet::Free, ConstraintSet::Free).unwrap();
        let full_m = d.subgrad_m(act, &p).unwrap();
        let full_w = d.grad_w(act, &p).unwrap();
        // Enumerate all batches of size 2.
        let mut vm = 0.0;
        let mut vw = 0.0;
        let mut count = 0.0;
        for i in 0..5 {
            for j in (i + 1)..5 {
                let (gm, gw) = d.stoch_grads(act, &p, &MinibatchSample::new(vec![i, j], 5).unwrap()).unwrap();
                vm += gm.sub(&full_m).frob_norm_sq();
                vw += gw.sub(&full_w).norm_sq();
                count += 1.0;
            }
        }
        let (em, ew) = prob.gradient_variance(&p, 2, 0, &mut Rng::new(0)).unwrap();
        assert!((vm / count - em).abs() <= 1e-9 * em.max(1.0));
        assert!((vw / count - ew).abs() <= 1e-9 * ew.max(1.0));
    }

    #[test]
    fn degenerate_unregularized_is_rejected() {
        let d = RegressionDataset::new(Mat::zeros(2, 3), Vector::zeros(2), 0.0).unwrap();
        assert!(matches!(
            RegressionProblem::new(d, Activation::Relu, 4, ConstraintSet::Free, ConstraintSet::Free),
            Err(Error::NotStronglyConvex(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let d = scalar_data(0.1);
        let p = LayeredParams::new(Mat::zeros(2, 1), Vector::zeros(1)).unwrap();
        assert!(matches!(d.loss(Activation::Relu, &p), Err(Error::Dimension { .. })));
    }
}
