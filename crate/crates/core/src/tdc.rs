//! Gradient TD learning with a two-layer value network on tabular MDPs.
//!
//! Value estimate `V_{M,w}(s) = φ(Mᵀψ(s))ᵀw`. The objective is the
//! mean-squared projected Bellman error under the on-policy stationary
//! distribution, evaluated exactly by finite sums; the learner is the
//! single-loop three-variable TDC update driven by i.i.d. transitions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{min_eigenvalue_spd, solve_lu, Cholesky, Mat, Rng, Vector};
use crate::optimizer::{fmt_f64, StepSchedule};
use crate::problems::{body_chain, features, Activation};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-12;
pub const LAMBDA_A_FLOOR: f64 = 1e-8;
/// Relative agreement required between the two MSPBE formulas.
pub const MSPBE_AGREEMENT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P[s][a][s′]`.
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
    /// `r[s][a] ∈ [0, 1]`.
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    /// `pi[s][a]`.
    pub pi: Vec<Vec<f64>>,
}

fn check_dist(row: &[f64], len: usize, name: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidMdp(format!("{name} has {} entries, expected {len}", row.len())));
    }
    if let Some(j) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidMdp(format!("{name}[{j}] = {} is not a probability", row[j])));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidMdp(format!("{name} sums to {s:.17}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("n_states and n_actions must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.p.len() != ns || self.r.len() != ns || self.pi.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "expected {ns} state rows in P, r and pi, got {}, {} and {}",
                self.p.len(),
                self.r.len(),
                self.pi.len()
            )));
        }
        for s in 0..ns {
            if self.p[s].len() != na {
                return Err(Error::InvalidMdp(format!("P[{s}] has {} actions, expected {na}", self.p[s].len())));
            }
            for a in 0..na {
                check_dist(&self.p[s][a], ns, &format!("P[{s}][{a}]"))?;
            }
            check_dist(&self.pi[s], na, &format!("pi[{s}]"))?;
            if self.r[s].len() != na {
                return Err(Error::InvalidMdp(format!("r[{s}] has {} entries, expected {na}", self.r[s].len())));
            }
            if let Some(a) = self.r[s].iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidMdp(format!("r[{s}][{a}] = {} is outside [0, 1]", self.r[s][a])));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text).map_err(|e| Error::InvalidMdp(format!("line {} column {}: {e}", e.line(), e.column())))?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serializes")
    }

    /// The committed five-state chain walk.
    pub fn chain_walk5() -> Self {
        Self::from_json(include_str!("../data/chain_walk5.json")).expect("golden MDP is valid")
    }

    /// Dirichlet(1) transition rows and policy, uniform rewards.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let mut dirichlet = |k: usize| {
            let mut v: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let p = (0..n_states).map(|_| (0..n_actions).map(|_| dirichlet(n_states)).collect()).collect();
        let pi = (0..n_states).map(|_| dirichlet(n_actions)).collect();
        let r = (0..n_states).map(|_| (0..n_actions).map(|_| rng.uniform()).collect()).collect();
        let mut mdp = Self {
            n_states,
            n_actions,
            p,
            r,
            gamma,
            pi,
        };
        // A second normalization pass absorbs the few ulps left by the first.
        for s in 0..n_states {
            for a in 0..n_actions {
                let t: f64 = mdp.p[s][a].iter().sum();
                mdp.p[s][a].iter_mut().for_each(|x| *x /= t);
            }
            let t: f64 = mdp.pi[s].iter().sum();
            mdp.pi[s].iter_mut().for_each(|x| *x /= t);
        }
        mdp.validate()?;
        Ok(mdp)
    }

    /// `P_π[s][s′] = Σ_a π(a|s) P(s′|s,a)`.
    pub fn p_pi(&self) -> Mat {
        let n = self.n_states;
        let mut m = Mat::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = self.pi[s][a];
                for t in 0..n {
                    m.set(s, t, m.get(s, t) + pa * self.p[s][a][t]);
                }
            }
        }
        m
    }

    pub fn r_pi(&self) -> Vector {
        Vector::from_vec((0..self.n_states).map(|s| (0..self.n_actions).map(|a| self.pi[s][a] * self.r[s][a]).sum()).collect())
    }

    /// Solves `(I − γP_π)V = r_π`.
    pub fn value_function(&self) -> Result<Vector> {
        let mut a = self.p_pi().scaled(-self.gamma);
        a.add_diagonal(1.0);
        solve_lu(&a, &self.r_pi())
    }
}

fn reachable_from(adj: &[Vec<bool>], start: usize, reverse: bool) -> Vec<bool> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let edge = if reverse { adj[v][u] } else { adj[u][v] };
            if edge && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Stationary distribution of the policy-induced chain. Rejects reducible
/// and periodic chains, for which it is not unique or not a limit.
pub fn stationary_dist(mdp: &TabularMdp) -> Result<Vector> {
    mdp.validate()?;
    let n = mdp.n_states;
    let pp = mdp.p_pi();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| pp.get(i, j) > 0.0).collect()).collect();
    if !reachable_from(&adj, 0, false).iter().all(|&b| b) || !reachable_from(&adj, 0, true).iter().all(|&b| b) {
        return Err(Error::InvalidMdp("the policy-induced chain is reducible; its stationary distribution is not unique".into()));
    }
    // Primitive iff some power up to (n−1)² + 1 is entrywise positive.
    let mut reach = adj.clone();
    let bound = (n - 1) * (n - 1) + 1;
    let mut primitive = reach.iter().all(|r| r.iter().all(|&b| b));
    for _ in 1..bound {
        if primitive {
            break;
        }
        let next: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| (0..n).any(|k| reach[i][k] && adj[k][j])).collect()).collect();
        reach = next;
        primitive = reach.iter().all(|r| r.iter().all(|&b| b));
    }
    if !primitive {
        return Err(Error::InvalidMdp("the policy-induced chain is periodic; power iteration does not converge".into()));
    }
    // Direct solve of dᵀ(P_π − I) = 0 with one equation replaced by Σd = 1,
    // then power-iteration polish.
    let mut a = pp.transpose();
    a.add_diagonal(-1.0);
    let mut rhs = Vector::zeros(n);
    for j in 0..n {
        a.set(n - 1, j, 1.0);
    }
    rhs[n - 1] = 1.0;
    let mut d = solve_lu(&a, &rhs)?.map(|v| v.max(0.0));
    let total: f64 = d.as_slice().iter().sum();
    d = d.scaled(1.0 / total);
    let mut resid = f64::INFINITY;
    for _ in 0..100_000 {
        let next = pp.t_matvec(&d)?;
        resid = next.sub(&d).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s: f64 = next.as_slice().iter().sum();
        d = next.scaled(1.0 / s);
        if resid <= 0.1 * STATIONARY_TOL {
            break;
        }
    }
    if resid > STATIONARY_TOL {
        return Err(Error::NoConvergence {
            solver: "stationary distribution",
            iters: 100_000,
            residual: resid,
        });
    }
    Ok(d)
}

/// Raw state features, activation and the two weight blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFeatures {
    /// `|𝒮| × m`, row `s` is `ψ(s)`.
    pub psi: Mat,
    pub act: Activation,
    /// `m × n`.
    pub m: Mat,
    pub w: Vector,
}

impl ValueFeatures {
    pub fn new(psi: Mat, act: Activation, m: Mat, w: Vector) -> Result<Self> {
        act.require_smooth("TDC")?;
        if psi.cols() != m.rows() || m.cols() != w.len() {
            return Err(Error::dim(
                "ValueFeatures",
                format!("psi {:?}, M {:?}, w {}", psi.shape(), m.shape(), w.len()),
            ));
        }
        Ok(Self { psi, act, m, w })
    }

    /// `Ψ_M` (rows `φ(Mᵀψ(s))ᵀ`) and the matching `φ′`.
    pub fn representation(&self) -> Result<(Mat, Mat)> {
        features(&self.psi, &self.m, self.act)
    }

    pub fn values(&self) -> Result<Vector> {
        self.representation()?.0.matvec(&self.w)
    }

    fn state_feature(&self, s: usize) -> (Vector, Vector) {
        let n = self.m.cols();
        let row = self.psi.row(s);
        let mut f = Vector::zeros(n);
        let mut d = Vector::zeros(n);
        for j in 0..n {
            let z: f64 = row.iter().enumerate().map(|(i, x)| x * self.m.get(i, j)).sum();
            f[j] = self.act.apply(z);
            d[j] = self.act.derivative(z);
        }
        (f, d)
    }
}

/// Exact tabular quantities shared by every evaluation on one MDP.
#[derive(Debug, Clone)]
pub struct MdpContext {
    pub mdp: TabularMdp,
    pub d: Vector,
    pub p_pi: Mat,
    pub r_pi: Vector,
    pub v_pi: Vector,
}

/// `C(M)`, `b(M, w)` and the pieces they are built from.
struct Moments {
    psi_m: Mat,
    deriv: Mat,
    /// `E[δ | s]`.
    delta_bar: Vector,
    c: Mat,
    b: Vector,
}

impl MdpContext {
    pub fn new(mdp: TabularMdp) -> Result<Self> {
        let d = stationary_dist(&mdp)?;
        let p_pi = mdp.p_pi();
        let r_pi = mdp.r_pi();
        let v_pi = mdp.value_function()?;
        Ok(Self { mdp, d, p_pi, r_pi, v_pi })
    }

    fn check(&self, feat: &ValueFeatures) -> Result<()> {
        feat.act.require_smooth("TDC")?;
        if feat.psi.rows() != self.mdp.n_states {
            return Err(Error::dim("tdc", format!("psi has {} rows for {} states", feat.psi.rows(), self.mdp.n_states)));
        }
        if feat.psi.cols() != feat.m.rows() || feat.m.cols() != feat.w.len() {
            return Err(Error::dim("tdc", format!("psi {:?}, M {:?}, w {}", feat.psi.shape(), feat.m.shape(), feat.w.len())));
        }
        Ok(())
    }

    fn moments(&self, feat: &ValueFeatures) -> Result<Moments> {
        self.check(feat)?;
        let (psi_m, deriv) = feat.representation()?;
        let v = psi_m.matvec(&feat.w)?;
        let pv = self.p_pi.matvec(&v)?;
        let delta_bar = Vector::from_vec((0..v.len()).map(|s| self.r_pi[s] + self.mdp.gamma * pv[s] - v[s]).collect());
        let n = psi_m.cols();
        let mut c = Mat::zeros(n, n);
        let mut b = Vector::zeros(n);
        for s in 0..self.mdp.n_states {
            let ds = self.d[s];
            let row = psi_m.row(s);
            for i in 0..n {
                b[i] += ds * delta_bar[s] * row[i];
                for j in 0..n {
                    c.set(i, j, c.get(i, j) + ds * row[i] * row[j]);
                }
            }
        }
        Ok(Moments {
            psi_m,
            deriv,
            delta_bar,
            c,
            b,
        })
    }

    /// Cholesky of `C(M)`, rejecting matrices that are singular to working
    /// precision.
    fn factor_c(c: &Mat) -> Result<Cholesky> {
        let singular = || Error::FeatureCovariance {
            lambda_min: min_eigenvalue_spd(c, 1e-10, 1000).unwrap_or(0.0),
            floor: 1e-13 * c.trace(),
        };
        let chol = Cholesky::factor(c).map_err(|_| singular())?;
        if min_eigenvalue_spd(c, 1e-10, 1000).unwrap_or(0.0) <= 1e-13 * c.trace() {
            return Err(singular());
        }
        Ok(chol)
    }

    /// `C(M) = E_{d_π}[ψ_M ψ_Mᵀ]`.
    pub fn feature_covariance(&self, feat: &ValueFeatures) -> Result<Mat> {
        Ok(self.moments(feat)?.c)
    }

    /// Smallest eigenvalue of `C(M)`; 0 when it is not positive definite.
    pub fn lambda_a(&self, feat: &ValueFeatures) -> Result<f64> {
        let c = self.feature_covariance(feat)?;
        Ok(min_eigenvalue_spd(&c, 1e-10, 1000).unwrap_or(0.0))
    }

    /// `bᵀC⁻¹b`.
    pub fn mspbe_bcb(&self, feat: &ValueFeatures) -> Result<f64> {
        let mo = self.moments(feat)?;
        let mu = Self::factor_c(&mo.c)?.solve(&mo.b)?;
        Ok(mo.b.dot(&mu))
    }

    /// `‖Ψ_M w − Π_M T^π Ψ_M w‖²_{d_π}` with `Π_M` built from an
    /// orthonormal basis of `D^{1/2}Ψ_M`.
    pub fn mspbe_projected(&self, feat: &ValueFeatures) -> Result<f64> {
        self.check(feat)?;
        let (psi_m, _) = feat.representation()?;
        let (ns, n) = psi_m.shape();
        let sq: Vec<f64> = self.d.as_slice().iter().map(|v| v.sqrt()).collect();
        // Modified Gram–Schmidt with one reorthogonalization pass.
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        let scale = (0..n)
            .map(|j| (0..ns).map(|s| (sq[s] * psi_m.get(s, j)).powi(2)).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        for j in 0..n {
            let mut v: Vec<f64> = (0..ns).map(|s| sq[s] * psi_m.get(s, j)).collect();
            for _ in 0..2 {
                for u in &q {
                    let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
                }
            }
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nv <= 1e-10 * scale {
                return Err(Error::FeatureCovariance { lambda_min: 0.0, floor: 0.0 });
            }
            v.iter_mut().for_each(|x| *x /= nv);
            q.push(v);
        }
        let v = psi_m.matvec(&feat.w)?;
        let pv = self.p_pi.matvec(&v)?;
        let tv: Vec<f64> = (0..ns).map(|s| sq[s] * (self.r_pi[s] + self.mdp.gamma * pv[s])).collect();
        let mut proj = vec![0.0; ns];
        for u in &q {
            let c: f64 = u.iter().zip(&tv).map(|(a, b)| a * b).sum();
            proj.iter_mut().zip(u).for_each(|(x, y)| *x += c * y);
        }
        Ok((0..ns).map(|s| (sq[s] * v[s] - proj[s]).powi(2)).sum())
    }

    /// MSPBE from both formulas, failing if they disagree.
    pub fn mspbe(&self, feat: &ValueFeatures) -> Result<f64> {
        let a = self.mspbe_projected(feat)?;
        let b = self.mspbe_bcb(feat)?;
        if (a - b).abs() > MSPBE_AGREEMENT * a.abs().max(b.abs()).max(1.0) {
            return Err(Error::Inconsistent(format!("MSPBE forms disagree: projected {a:e} vs bCb {b:e}")));
        }
        Ok(b)
    }

    /// `μ(M, w) = C(M)⁻¹ b(M, w)`.
    pub fn mu_fixed_point(&self, feat: &ValueFeatures) -> Result<Vector> {
        let mo = self.moments(feat)?;
        let mu = Self::factor_c(&mo.c)?.solve(&mo.b)?;
        let resid = mo.c.matvec(&mu)?.sub(&mo.b).norm();
        if resid > 1e-10 * mo.b.norm().max(1.0) {
            return Err(Error::NoConvergence {
                solver: "mu fixed point",
                iters: 1,
                residual: resid,
            });
        }
        Ok(mu)
    }

    /// `∇_M f` with the auxiliary vector `μ` supplied; exact when
    /// `μ = μ(M, w)`.
    ///
    /// `2E[(ψ_sᵀμ)(γ∇_M(ψ_{s′}ᵀw) − ∇_M(ψ_sᵀw)) + (δ − ψ_sᵀμ)∇_M(ψ_sᵀμ)]`
    /// with `∇_M(ψ_M(s)ᵀv) = ψ(s)(v ⊙ φ′(Mᵀψ(s)))ᵀ`.
    pub fn grad_m(&self, feat: &ValueFeatures, mu: &Vector) -> Result<Mat> {
        let mo = self.moments(feat)?;
        if mu.len() != feat.w.len() {
            return Err(Error::dim("tdc grad_M", format!("mu has length {}, expected {}", mu.len(), feat.w.len())));
        }
        let g = self.mdp.gamma;
        let q = mo.psi_m.matvec(mu)?;
        let dq = self.d.hadamard(&q);
        // Next-state weights Σ_s d(s) q(s) P_π(s, s′).
        let fwd = self.p_pi.t_matvec(&dq)?;
        let coef_w = Vector::from_vec((0..q.len()).map(|s| 2.0 * g * fwd[s] - 2.0 * dq[s]).collect());
        let coef_mu = Vector::from_vec((0..q.len()).map(|s| 2.0 * self.d[s] * (mo.delta_bar[s] - q[s])).collect());
        let mut grad = body_chain(&feat.psi, &coef_w, &feat.w, &mo.deriv)?;
        grad.axpy(1.0, &body_chain(&feat.psi, &coef_mu, mu, &mo.deriv)?);
        Ok(grad)
    }

    /// `∇_w f = −2b + 2γE[ψ_M(s′)ψ_M(s)ᵀ]μ`.
    pub fn grad_w(&self, feat: &ValueFeatures, mu: &Vector) -> Result<Vector> {
        let mo = self.moments(feat)?;
        if mu.len() != feat.w.len() {
            return Err(Error::dim("tdc grad_w", format!("mu has length {}, expected {}", mu.len(), feat.w.len())));
        }
        let dq = self.d.hadamard(&mo.psi_m.matvec(mu)?);
        let next = self.p_pi.matmul(&mo.psi_m)?;
        let mut g = next.t_matvec(&dq)?.scaled(2.0 * self.mdp.gamma);
        g.axpy(-2.0, &mo.b);
        Ok(g)
    }

    /// `C(M)μ − b(M, w)`, the expected auxiliary increment.
    pub fn mu_residual(&self, feat: &ValueFeatures, mu: &Vector) -> Result<Vector> {
        let mo = self.moments(feat)?;
        Ok(mo.c.matvec(mu)?.sub(&mo.b))
    }

    /// Linear TD fixed point with the representation frozen at `M`:
    /// `Ψᵀ D (Ψ − γP_πΨ) w = Ψᵀ D r_π`.
    pub fn linear_td_fixed_point(&self, feat: &ValueFeatures) -> Result<Vector> {
        self.check(feat)?;
        let (psi_m, _) = feat.representation()?;
        let mut diff = self.p_pi.matmul(&psi_m)?.scaled(-self.mdp.gamma);
        diff.axpy(1.0, &psi_m);
        let mut dpsi = psi_m.clone();
        for s in 0..dpsi.rows() {
            for j in 0..dpsi.cols() {
                dpsi.set(s, j, dpsi.get(s, j) * self.d[s]);
            }
        }
        let a = dpsi.t_matmul(&diff)?;
        let rhs = dpsi.t_matvec(&self.r_pi)?;
        solve_lu(&a, &rhs)
    }

    /// `‖V_{M,w} − V^π‖_{d_π}`.
    pub fn value_error(&self, feat: &ValueFeatures) -> Result<f64> {
        let v = feat.values()?;
        Ok((0..v.len()).map(|s| self.d[s] * (v[s] - self.v_pi[s]).powi(2)).sum::<f64>().sqrt())
    }

    /// Probability of the transition `(s, a, s′)` under `d_π ⊗ π ⊗ P`.
    pub fn transition_prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.d[s] * self.mdp.pi[s][a] * self.mdp.p[s][a][s2]
    }

    pub fn sample_transition(&self, rng: &mut Rng) -> (usize, usize, usize) {
        let s = rng.categorical(self.d.as_slice());
        let a = rng.categorical(&self.mdp.pi[s]);
        let s2 = rng.categorical(&self.mdp.p[s][a]);
        (s, a, s2)
    }
}

pub fn mspbe(mdp: &TabularMdp, feat: &ValueFeatures) -> Result<f64> {
    MdpContext::new(mdp.clone())?.mspbe(feat)
}

pub fn mu_fixed_point(mdp: &TabularMdp, feat: &ValueFeatures) -> Result<Vector> {
    MdpContext::new(mdp.clone())?.mu_fixed_point(feat)
}

pub fn tdc_grad_m(mdp: &TabularMdp, feat: &ValueFeatures, mu: &Vector) -> Result<Mat> {
    MdpContext::new(mdp.clone())?.grad_m(feat, mu)
}

pub fn tdc_grad_w(mdp: &TabularMdp, feat: &ValueFeatures, mu: &Vector) -> Result<Vector> {
    MdpContext::new(mdp.clone())?.grad_w(feat, mu)
}

/// Directions of the three updates for one transition; the step is
/// `M −= α·dm`, `w −= β·dw`, `μ −= ζ·dmu`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub dm: Mat,
    pub dw: Vector,
    pub dmu: Vector,
}

/// Per-transition increments, all read at the pre-update `(M, w, μ)`.
pub fn increments(mdp: &TabularMdp, feat: &ValueFeatures, mu: &Vector, s: usize, a: usize, s2: usize) -> Result<Increments> {
    let (f_s, d_s) = feat.state_feature(s);
    let (f_n, d_n) = feat.state_feature(s2);
    let g = mdp.gamma;
    let w = &feat.w;
    let delta = mdp.r[s][a] + g * f_n.dot(w) - f_s.dot(w);
    let q = f_s.dot(mu);
    let psi_s = feat.psi.row_vector(s);
    let psi_n = feat.psi.row_vector(s2);
    // 2[(q)(γ∇(ψ_{s′}ᵀw) − ∇(ψ_sᵀw)) + (δ − q)∇(ψ_sᵀμ)]
    let mut dm = psi_n.outer(&w.hadamard(&d_n)).scaled(2.0 * g * q);
    dm.axpy(-2.0 * q, &psi_s.outer(&w.hadamard(&d_s)));
    dm.axpy(2.0 * (delta - q), &psi_s.outer(&mu.hadamard(&d_s)));
    let mut dw = f_n.scaled(2.0 * g * q);
    dw.axpy(-2.0 * delta, &f_s);
    let mut dmu = f_s.scaled(q);
    dmu.axpy(-delta, &f_s);
    Ok(Increments { dm, dw, dmu })
}

/// Step sizes for the three variables; `ζ_k = ζ₀·β_k/β₀`, or
/// `ζ₀/(k+1)^{2/5}` when `β₀ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcSchedule {
    pub base: StepSchedule,
    pub zeta0: f64,
}

impl TdcSchedule {
    pub fn new(base: StepSchedule, zeta0: Option<f64>) -> Result<Self> {
        base.validate()?;
        let zeta0 = zeta0.unwrap_or(base.beta0);
        if !(zeta0 >= 0.0) || !zeta0.is_finite() {
            return Err(Error::InvalidArgument(format!("zeta0 must be finite and >= 0, got {zeta0}")));
        }
        Ok(Self { base, zeta0 })
    }

    pub fn rates(&self, k: u64) -> (f64, f64, f64) {
        let b = self.base.beta(k);
        let z = if self.base.beta0 > 0.0 {
            self.zeta0 * b / self.base.beta0
        } else {
            self.zeta0 / ((k + 1) as f64).powf(0.4)
        };
        (self.base.alpha(k), b, z)
    }
}

#[derive(Debug, Clone)]
pub struct TdcState {
    pub feat: ValueFeatures,
    pub mu: Vector,
    pub k: u64,
    pub rng: Rng,
}

/// One Algorithm-1 iteration from a single sampled transition.
pub fn tdc_step(state: &mut TdcState, ctx: &MdpContext, sched: &TdcSchedule) -> Result<()> {
    let (s, a, s2) = ctx.sample_transition(&mut state.rng);
    let (alpha, beta, zeta) = sched.rates(state.k);
    let inc = increments(&ctx.mdp, &state.feat, &state.mu, s, a, s2)?;
    let mut m = state.feat.m.clone();
    m.axpy(-alpha, &inc.dm);
    let mut w = state.feat.w.clone();
    w.axpy(-beta, &inc.dw);
    let mut mu = state.mu.clone();
    mu.axpy(-zeta, &inc.dmu);
    if !m.is_finite() || !w.is_finite() || !mu.is_finite() {
        return Err(Error::Diverged {
            k: state.k as usize,
            detail: "non-finite TDC update".into(),
            body: state.feat.m.as_slice().to_vec(),
            head: state.feat.w.as_slice().iter().chain(state.mu.as_slice()).copied().collect(),
        });
    }
    state.feat.m = m;
    state.feat.w = w;
    state.mu = mu;
    state.k += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcRunConfig {
    pub iters: u64,
    pub eval_period: u64,
    pub lambda_a_floor: f64,
    /// Stop with an error when `λ_min(C(M))` falls below the floor.
    pub abort_on_lambda_a: bool,
}

impl Default for TdcRunConfig {
    fn default() -> Self {
        Self {
            iters: 10_000,
            eval_period: 100,
            lambda_a_floor: LAMBDA_A_FLOOR,
            abort_on_lambda_a: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcRecord {
    pub k: u64,
    pub mspbe: f64,
    pub mu_err: f64,
    pub value_err: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub lambda_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcMeta {
    pub seed: u64,
    pub schedule: TdcSchedule,
    pub iters: u64,
    pub eval_period: u64,
    pub activation: Activation,
    pub zeta_over_beta: Option<f64>,
    pub min_lambda_a: f64,
    pub lambda_a_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcTrace {
    pub meta: TdcMeta,
    pub records: Vec<TdcRecord>,
    pub final_features: ValueFeatures,
    pub final_mu: Vector,
}

pub const TDC_HEADER: &str = "k,mspbe,mu_err,value_err,alpha,beta,zeta";

impl TdcTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TDC_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.k,
                fmt_f64(r.mspbe),
                fmt_f64(r.mu_err),
                fmt_f64(r.value_err),
                fmt_f64(r.alpha),
                fmt_f64(r.beta),
                fmt_f64(r.zeta)
            );
        }
        s
    }
}

fn tdc_record(ctx: &MdpContext, st: &TdcState, sched: &TdcSchedule, cfg: &TdcRunConfig) -> Result<TdcRecord> {
    let lambda_a = ctx.lambda_a(&st.feat)?;
    if cfg.abort_on_lambda_a && lambda_a < cfg.lambda_a_floor {
        return Err(Error::FeatureCovariance {
            lambda_min: lambda_a,
            floor: cfg.lambda_a_floor,
        });
    }
    let (alpha, beta, zeta) = sched.rates(st.k);
    let (mspbe, mu_err) = if lambda_a > 0.0 {
        (ctx.mspbe(&st.feat)?, ctx.mu_fixed_point(&st.feat)?.dist(&st.mu))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TdcRecord {
        k: st.k,
        mspbe,
        mu_err,
        value_err: ctx.value_error(&st.feat)?,
        alpha,
        beta,
        zeta,
        lambda_a,
    })
}

/// Runs Algorithm 1 for `cfg.iters` iterations with exact evaluation every
/// `cfg.eval_period` iterations.
pub fn run_tdc(ctx: &MdpContext, init: ValueFeatures, mu0: Vector, sched: &TdcSchedule, cfg: &TdcRunConfig, seed: u64) -> Result<TdcTrace> {
    ctx.check(&init)?;
    if mu0.len() != init.w.len() {
        return Err(Error::dim("run_tdc", format!("mu0 has length {}, expected {}", mu0.len(), init.w.len())));
    }
    if cfg.eval_period == 0 {
        return Err(Error::InvalidArgument("eval_period must be positive".into()));
    }
    let mut st = TdcState {
        feat: init,
        mu: mu0,
        k: 0,
        rng: Rng::new(seed),
    };
    let mut records = vec![tdc_record(ctx, &st, sched, cfg)?];
    while st.k < cfg.iters {
        tdc_step(&mut st, ctx, sched)?;
        if st.k.is_multiple_of(cfg.eval_period) || st.k == cfg.iters {
            records.push(tdc_record(ctx, &st, sched, cfg)?);
        }
    }
    let min_lambda_a = records.iter().map(|r| r.lambda_a).fold(f64::INFINITY, f64::min);
    let meta = TdcMeta {
        seed,
        schedule: *sched,
        iters: cfg.iters,
        eval_period: cfg.eval_period,
        activation: st.feat.act,
        zeta_over_beta: (sched.base.beta0 > 0.0).then(|| sched.zeta0 / sched.base.beta0),
        min_lambda_a,
        lambda_a_floor: cfg.lambda_a_floor,
    };
    Ok(TdcTrace {
        meta,
        records,
        final_features: st.feat,
        final_mu: st.mu,
    })
}
