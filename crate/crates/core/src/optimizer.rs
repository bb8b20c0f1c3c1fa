//! Two-time-scale projected stochastic (sub)gradient descent
//!
//! `M_{k+1} = proj_ℳ(M_k − α_k G_M(M_k, w_k, ξ_k))`,
//! `w_{k+1} = proj_𝒲(w_k − β_k ∇_w ℓ(M_k, w_k, ξ_k))`,
//!
//! with both blocks reading the same pre-update iterate and the same sample,
//! plus uniform-rate and RMSProp baselines and the traced training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Vector};
use crate::problems::{LayeredParams, Objective, ProblemConstants};
use crate::stackelberg::{self, ProxOptions, BEST_RESPONSE_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `α₀/(k+1)^{3/5}`, `β₀/(k+1)^{2/5}`.
    Thm1,
    /// `α₀/(k+h+1)`, `β₀/(k+h+1)^{2/3}`.
    Thm2,
    /// `α₀`, `β₀`.
    Constant,
    /// `α₀` for both blocks.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub alpha0: f64,
    pub beta0: f64,
    #[serde(default)]
    pub h: f64,
}

impl StepSchedule {
    pub fn thm1(alpha0: f64, beta0: f64) -> Self {
        Self {
            kind: ScheduleKind::Thm1,
            alpha0,
            beta0,
            h: 0.0,
        }
    }

    pub fn thm2(alpha0: f64, beta0: f64, h: f64) -> Self {
        Self {
            kind: ScheduleKind::Thm2,
            alpha0,
            beta0,
            h,
        }
    }

    /// Theorem-2 schedule with the smallest integer `h` for which
    /// `α_k ≤ β_k ≤ 1` and `α_k ≤ 1` hold for every `k ≥ 0`.
    pub fn thm2_auto(alpha0: f64, beta0: f64) -> Self {
        Self::thm2(alpha0, beta0, Self::auto_h(alpha0, beta0))
    }

    /// `β₀ = α₀^{2/3}` with `h + 1 = max(α₀, 1)`: at `k = 0` both rates
    /// equal 1 and every Theorem-2 ordering condition is tight.
    pub fn thm2_tight(alpha0: f64) -> Self {
        Self::thm2_auto(alpha0, alpha0.max(1.0).powf(2.0 / 3.0))
    }

    /// `h + 1 ≥ max(α₀, (α₀/β₀)³, β₀^{3/2}, 1)`; the ratio and both rates
    /// decrease in `k`, so `k = 0` is the binding case.
    pub fn auto_h(alpha0: f64, beta0: f64) -> f64 {
        let ratio = if beta0 > 0.0 { (alpha0 / beta0).powi(3) } else { 1.0 };
        let need = alpha0.max(ratio).max(beta0.max(0.0).powf(1.5)).max(1.0);
        // Guard against the cube root landing a hair below an integer.
        let mut h = ((need * (1.0 - 1e-12)).ceil() - 1.0).max(0.0);
        while alpha0 / (h + 1.0) > beta0 / (h + 1.0).powf(2.0 / 3.0) * (1.0 + 1e-12) || beta0 / (h + 1.0).powf(2.0 / 3.0) > 1.0 + 1e-12 {
            h += 1.0;
        }
        h
    }

    pub fn constant(alpha0: f64, beta0: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            alpha0,
            beta0,
            h: 0.0,
        }
    }

    pub fn uniform(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Uniform,
            alpha0: lr,
            beta0: lr,
            h: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0) || !(self.beta0 >= 0.0) || !self.alpha0.is_finite() || !self.beta0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step sizes must be finite and nonnegative, got alpha0 = {}, beta0 = {}",
                self.alpha0, self.beta0
            )));
        }
        if !(self.h >= 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidArgument(format!("offset h must be >= 0, got {}", self.h)));
        }
        Ok(())
    }

    pub fn alpha(&self, k: u64) -> f64 {
        let k = k as f64;
        match self.kind {
            ScheduleKind::Thm1 => self.alpha0 / (k + 1.0).powf(0.6),
            ScheduleKind::Thm2 => self.alpha0 / (k + self.h + 1.0),
            ScheduleKind::Constant | ScheduleKind::Uniform => self.alpha0,
        }
    }

    pub fn beta(&self, k: u64) -> f64 {
        let kf = k as f64;
        match self.kind {
            ScheduleKind::Thm1 => self.beta0 / (kf + 1.0).powf(0.4),
            ScheduleKind::Thm2 => self.beta0 / (kf + self.h + 1.0).powf(2.0 / 3.0),
            ScheduleKind::Constant => self.beta0,
            ScheduleKind::Uniform => self.alpha0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCondition {
    pub name: String,
    pub satisfied: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs` for `≤` conditions and `lhs − rhs` for `≥` ones, so a
    /// nonnegative margin means the condition holds.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub kind: ScheduleKind,
    pub iters: u64,
    pub conditions: Vec<ScheduleCondition>,
    pub suggestions: Vec<String>,
}

impl ScheduleReport {
    pub fn all_satisfied(&self) -> bool {
        self.conditions.iter().all(|c| c.satisfied)
    }

    pub fn violations(&self) -> Vec<&ScheduleCondition> {
        self.conditions.iter().filter(|c| !c.satisfied).collect()
    }
}

fn le(name: &str, lhs: f64, rhs: f64) -> ScheduleCondition {
    ScheduleCondition {
        name: name.into(),
        satisfied: lhs <= rhs * (1.0 + 1e-12),
        lhs,
        rhs,
        margin: rhs - lhs,
    }
}

fn ge(name: &str, lhs: f64, rhs: f64) -> ScheduleCondition {
    ScheduleCondition {
        name: name.into(),
        satisfied: lhs >= rhs * (1.0 - 1e-12),
        lhs,
        rhs,
        margin: lhs - rhs,
    }
}

/// Checks the step-size conditions of the convergence theorems against the
/// given constants. Report only: the schedule is never changed.
pub fn validate_schedule(sched: &StepSchedule, consts: &ProblemConstants, iters: u64) -> ScheduleReport {
    let mut conditions = Vec::new();
    let mut suggestions = Vec::new();
    let lam = consts.lambda;
    let cap = (lam / (2.0 * consts.l * consts.l)).min(2.0 / lam);
    match sched.kind {
        ScheduleKind::Thm1 => {
            conditions.push(le("alpha0 <= beta0", sched.alpha0, sched.beta0));
            conditions.push(le("beta0 <= 1", sched.beta0, 1.0));
            conditions.push(le("beta0 <= min(lambda/(2L^2), 2/lambda)", sched.beta0, cap));
        }
        ScheduleKind::Thm2 => {
            let a0 = sched.alpha(0);
            let b0 = sched.beta(0);
            conditions.push(le("alpha_k <= beta_k", a0, b0));
            conditions.push(le("alpha_k <= 1", a0, 1.0));
            conditions.push(le("beta_k <= 1", b0, 1.0));
            conditions.push(le("beta_k <= min(lambda/(2L^2), 2/lambda)", b0, cap));
            match consts.lambda_phi {
                Some(lp) => {
                    conditions.push(le("alpha0/beta0 <= 2 lambda/lambda_phi", sched.alpha0 / sched.beta0, 2.0 * lam / lp));
                    conditions.push(ge("alpha0 >= 8/lambda_phi", sched.alpha0, 8.0 / lp));
                    if 8.0 / lp > 1.0 {
                        let h = StepSchedule::auto_h(sched.alpha0.max(8.0 / lp), sched.beta0);
                        suggestions.push(format!(
                            "alpha0 >= 8/lambda_phi = {:.6} exceeds 1; alpha_k <= 1 needs the offset h >= {h} (StepSchedule::thm2_auto)",
                            8.0 / lp
                        ));
                    }
                }
                None => conditions.push(ScheduleCondition {
                    name: "lambda_phi available (Phi strongly convex)".into(),
                    satisfied: false,
                    lhs: f64::NAN,
                    rhs: f64::NAN,
                    margin: f64::NAN,
                }),
            }
            if a0 > 1.0 || a0 > b0 || b0 > 1.0 {
                suggestions.push(format!(
                    "offset h = {} is too small; StepSchedule::auto_h gives {}",
                    sched.h,
                    StepSchedule::auto_h(sched.alpha0, sched.beta0)
                ));
            }
        }
        ScheduleKind::Constant => {
            conditions.push(le("alpha <= beta", sched.alpha0, sched.beta0));
            conditions.push(le("beta <= 1", sched.beta0, 1.0));
        }
        ScheduleKind::Uniform => {}
    }
    ScheduleReport {
        kind: sched.kind,
        iters,
        conditions,
        suggestions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsState {
    pub v_body: Mat,
    pub v_head: Vector,
    pub gamma: f64,
    pub eps: f64,
}

impl RmsState {
    pub const DEFAULT_GAMMA: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(shape: (usize, usize), gamma: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("RMSProp decay must lie in [0, 1), got {gamma}")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("RMSProp epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            v_body: Mat::zeros(shape.0, shape.1),
            v_head: Vector::zeros(shape.1),
            gamma,
            eps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub params: LayeredParams,
    pub k: u64,
    pub rng: Rng,
    pub rms: Option<RmsState>,
}

impl OptimizerState {
    /// Projects `init` onto the feasible sets.
    pub fn new<O: Objective + ?Sized>(obj: &O, init: LayeredParams, rng: Rng) -> Result<Self> {
        obj.check_shapes(&init)?;
        if !init.is_finite() {
            return Err(Error::NonFinite { context: "initial parameters".into() });
        }
        let params = LayeredParams::new(obj.body_set().project_mat(&init.body), obj.head_set().project_vec(&init.head))?;
        Ok(Self { params, k: 0, rng, rms: None })
    }
}

fn diverged(state: &OptimizerState, detail: &str) -> Error {
    Error::Diverged {
        k: state.k as usize,
        detail: detail.into(),
        body: state.params.body.as_slice().to_vec(),
        head: state.params.head.as_slice().to_vec(),
    }
}

fn sample<O: Objective + ?Sized>(state: &mut OptimizerState, obj: &O, batch_size: usize) -> Result<(Mat, Vector)> {
    let (gm, gw) = obj.sample_grads(&state.params, batch_size, &mut state.rng)?;
    if !gm.is_finite() || !gw.is_finite() {
        return Err(diverged(state, "non-finite stochastic gradient"));
    }
    Ok((gm, gw))
}

/// One step of the two-time-scale update at rates `(α_k, β_k)`.
pub fn step_two_timescale<O: Objective + ?Sized>(
    state: &mut OptimizerState,
    obj: &O,
    sched: &StepSchedule,
    batch_size: usize,
) -> Result<()> {
    let (alpha, beta) = (sched.alpha(state.k), sched.beta(state.k));
    step_with_rates(state, obj, alpha, beta, batch_size)
}

fn step_with_rates<O: Objective + ?Sized>(state: &mut OptimizerState, obj: &O, alpha: f64, beta: f64, batch_size: usize) -> Result<()> {
    let (gm, gw) = sample(state, obj, batch_size)?;
    let mut body = state.params.body.clone();
    body.axpy(-alpha, &gm);
    let mut head = state.params.head.clone();
    head.axpy(-beta, &gw);
    let body = obj.body_set().project_mat(&body);
    let head = obj.head_set().project_vec(&head);
    if !body.is_finite() || !head.is_finite() {
        return Err(diverged(state, "non-finite iterate after update"));
    }
    state.params = LayeredParams { body, head };
    state.k += 1;
    Ok(())
}

/// Both blocks at the same rate.
pub fn step_uniform<O: Objective + ?Sized>(state: &mut OptimizerState, obj: &O, lr: f64, batch_size: usize) -> Result<()> {
    step_with_rates(state, obj, lr, lr, batch_size)
}

/// `v ← γv + (1−γ)g²`, `θ ← proj(θ − lr·g/(√v + ε))`, with separate rates
/// for body and head.
pub fn step_rmsprop<O: Objective + ?Sized>(
    state: &mut OptimizerState,
    obj: &O,
    lr_body: f64,
    lr_head: f64,
    batch_size: usize,
) -> Result<()> {
    if state.rms.is_none() {
        state.rms = Some(RmsState::new(obj.body_shape(), RmsState::DEFAULT_GAMMA, RmsState::DEFAULT_EPS)?);
    }
    let (gm, gw) = sample(state, obj, batch_size)?;
    let rms = state.rms.as_mut().expect("initialized above");
    let (g, e) = (rms.gamma, rms.eps);
    let mut body = state.params.body.clone();
    for ((p, v), gi) in body.as_mut_slice().iter_mut().zip(rms.v_body.as_mut_slice()).zip(gm.as_slice()) {
        *v = g * *v + (1.0 - g) * gi * gi;
        *p -= lr_body * gi / (v.sqrt() + e);
    }
    let mut head = state.params.head.clone();
    for ((p, v), gi) in head.as_mut_slice().iter_mut().zip(rms.v_head.as_mut_slice()).zip(gw.as_slice()) {
        *v = g * *v + (1.0 - g) * gi * gi;
        *p -= lr_head * gi / (v.sqrt() + e);
    }
    let body = obj.body_set().project_mat(&body);
    let head = obj.head_set().project_vec(&head);
    if !body.is_finite() || !head.is_finite() {
        return Err(diverged(state, "non-finite iterate after RMSProp update"));
    }
    state.params = LayeredParams { body, head };
    state.k += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Sgd { schedule: StepSchedule },
    RmsProp { lr_body: f64, lr_head: f64, gamma: f64, eps: f64 },
}

impl Method {
    pub fn rates(&self, k: u64) -> (f64, f64) {
        match self {
            Method::Sgd { schedule } => (schedule.alpha(k), schedule.beta(k)),
            Method::RmsProp { lr_body, lr_head, .. } => (*lr_body, *lr_head),
        }
    }
}

/// Which full-batch quantities to compute at each evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub phi: bool,
    pub tracking: bool,
    /// `ρ̂` for the stationarity surrogate; `None` skips the prox solves.
    pub stationarity_rho_hat: Option<f64>,
    pub prox: ProxOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            phi: true,
            tracking: true,
            stationarity_rho_hat: None,
            prox: ProxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub eval_period: u64,
    pub eval: EvalOptions,
    /// Reject schedules that violate the theorem conditions.
    pub strict: bool,
    /// Iterations at which the parameters are kept in the output.
    #[serde(default)]
    pub snapshots: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            batch_size: 1,
            eval_period: 10,
            eval: EvalOptions::default(),
            strict: false,
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub loss: f64,
    pub phi: Option<f64>,
    pub w_track: Option<f64>,
    pub stationarity: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub problem: String,
    pub gradient_scaling: String,
    pub method: Method,
    pub iters: u64,
    pub batch_size: usize,
    pub eval_period: u64,
    pub constants: Option<ProblemConstants>,
    pub schedule_report: Option<ScheduleReport>,
    /// Checkpoints whose prox solve failed; their stationarity is blank.
    pub prox_failures: Vec<u64>,
    /// Set when the run stopped early on a numerical failure.
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: &str = "k,loss,phi,w_track,stationarity,alpha,beta";

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl TrainTrace {
    /// CSV with one row per record; quantities that were not evaluated are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.k,
                fmt_f64(r.loss),
                fmt_opt(r.phi),
                fmt_opt(r.w_track),
                fmt_opt(r.stationarity),
                fmt_f64(r.alpha),
                fmt_f64(r.beta)
            );
        }
        s
    }

    pub fn meta_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: TrainTrace,
    pub final_params: LayeredParams,
    /// `(k, params)` for each requested snapshot that was reached.
    pub snapshots: Vec<(u64, LayeredParams)>,
}

struct Evaluator<'a, O: ?Sized> {
    obj: &'a O,
    opts: EvalOptions,
    prev_prox: Option<Mat>,
    failures: Vec<u64>,
}

impl<O: Objective + ?Sized> Evaluator<'_, O> {
    fn record(&mut self, p: &LayeredParams, k: u64, rates: (f64, f64)) -> Result<TraceRecord> {
        let loss = self.obj.loss(p)?;
        let need_br = self.opts.phi || self.opts.tracking;
        let br = if need_br {
            Some(stackelberg::best_response(self.obj, &p.body, BEST_RESPONSE_TOL)?)
        } else {
            None
        };
        let phi = match (&br, self.opts.phi) {
            (Some(b), true) => Some(self.obj.loss(&LayeredParams::new(p.body.clone(), b.w_star.clone())?)?),
            _ => None,
        };
        let w_track = match (&br, self.opts.tracking) {
            (Some(b), true) => Some(p.head.dist(&b.w_star)),
            _ => None,
        };
        let stationarity = match self.opts.stationarity_rho_hat {
            Some(rho) => match stackelberg::moreau_prox_with(self.obj, &p.body, rho, &self.opts.prox, self.prev_prox.as_ref()) {
                Ok(probe) => {
                    let s = probe.envelope_grad_norm * probe.envelope_grad_norm;
                    self.prev_prox = Some(probe.m_hat);
                    Some(s)
                }
                Err(Error::ProxStagnation { .. }) => {
                    self.failures.push(k);
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        if !loss.is_finite() || phi.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("evaluation at iteration {k}"),
            });
        }
        Ok(TraceRecord {
            k,
            loss,
            phi,
            w_track,
            stationarity,
            alpha: rates.0,
            beta: rates.1,
        })
    }
}

/// Runs `cfg.iters` steps from `init`, evaluating every `cfg.eval_period`
/// iterations, at `k = 0` and at the last iteration. A divergence mid-run
/// ends the run early and is recorded in the metadata rather than
/// returned as an error.
pub fn run<O: Objective + ?Sized>(
    obj: &O,
    method: &Method,
    init: LayeredParams,
    cfg: &RunConfig,
    seed: u64,
    constants: Option<&ProblemConstants>,
) -> Result<RunOutput> {
    if cfg.eval_period == 0 {
        return Err(Error::InvalidArgument("eval_period must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let report = match (method, constants) {
        (Method::Sgd { schedule }, Some(c)) => {
            schedule.validate()?;
            Some(validate_schedule(schedule, c, cfg.iters))
        }
        (Method::Sgd { schedule }, None) => {
            schedule.validate()?;
            None
        }
        (Method::RmsProp { gamma, eps, .. }, _) => {
            RmsState::new(obj.body_shape(), *gamma, *eps)?;
            None
        }
    };
    if cfg.strict {
        if let Some(r) = &report {
            if !r.all_satisfied() {
                let names: Vec<_> = r.violations().iter().map(|c| c.name.clone()).collect();
                return Err(Error::InvalidArgument(format!("schedule violates: {}", names.join("; "))));
            }
        }
    }
    let mut state = OptimizerState::new(obj, init, Rng::new(seed))?;
    if let Method::RmsProp { gamma, eps, .. } = method {
        state.rms = Some(RmsState::new(obj.body_shape(), *gamma, *eps)?);
    }
    let mut eval = Evaluator {
        obj,
        opts: cfg.eval,
        prev_prox: None,
        failures: Vec::new(),
    };
    let mut records = vec![eval.record(&state.params, 0, method.rates(0))?];
    let mut snapshots = Vec::new();
    if cfg.snapshots.contains(&0) {
        snapshots.push((0, state.params.clone()));
    }
    let mut diverged_msg = None;
    while state.k < cfg.iters {
        let res = match method {
            Method::Sgd { schedule } => step_two_timescale(&mut state, obj, schedule, cfg.batch_size),
            Method::RmsProp { lr_body, lr_head, .. } => step_rmsprop(&mut state, obj, *lr_body, *lr_head, cfg.batch_size),
        };
        match res {
            Ok(()) => {}
            Err(e @ Error::Diverged { .. }) => {
                diverged_msg = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.snapshots.contains(&state.k) {
            snapshots.push((state.k, state.params.clone()));
        }
        if state.k % cfg.eval_period == 0 || state.k == cfg.iters {
            match eval.record(&state.params, state.k, method.rates(state.k)) {
                Ok(r) => records.push(r),
                Err(e @ Error::NonFinite { .. }) => {
                    diverged_msg = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let meta = TraceMeta {
        seed,
        problem: obj.id(),
        gradient_scaling: obj.scaling().describe().into(),
        method: *method,
        iters: cfg.iters,
        batch_size: cfg.batch_size,
        eval_period: cfg.eval_period,
        constants: constants.cloned(),
        schedule_report: report,
        prox_failures: eval.failures,
        diverged: diverged_msg,
    };
    Ok(RunOutput {
        trace: TrainTrace { meta, records },
        final_params: state.params,
        snapshots,
    })
}
