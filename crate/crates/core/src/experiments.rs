//! Seeded end-to-end studies: the three-arm learning-rate comparison,
//! stationarity decay, the toy rate fit, paired landscape slices and the
//! frozen-body TDC fixed point.
//!
//! Every study is a pure function of its config, so the CLI and the test
//! suite share one implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{trajectory_study, CheckpointSlices, SliceTemplate};
use crate::numcore::{Mat, Rng, Vector};
use crate::optimizer::{run, step_two_timescale, EvalOptions, Method, OptimizerState, RunConfig, StepSchedule, TrainTrace};
use crate::problems::{
    toy_phi_minimizer, Activation, ConstraintSet, LayeredParams, RegressionProblem, SyntheticRegression, ToyProblem,
};
use crate::ratefit::{average_series, fit_rate, RateFit};
use crate::stackelberg::ProxOptions;
use crate::tdc::{MdpContext, TabularMdp, TdcRunConfig, TdcSchedule, ValueFeatures};

pub const BENCH_BODY_RADIUS: f64 = 100.0;
pub const BENCH_HEAD_RADIUS: f64 = 1000.0;

/// Stream of the benchmark seed that generates data and initialization;
/// stream 0 is left to the minibatch sampler.
pub const INSTANCE_STREAM: u64 = 1;

/// The synthetic regression benchmark (128 samples, 20 features, 10 relu
/// units, λ = 0.1) with its seeded initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub seed: u64,
    pub problem: RegressionProblem,
    pub init: LayeredParams,
}

impl BenchmarkInstance {
    /// Data first, then `M₀ ~ N(0, 1/m)` and `w₀ ~ N(0, 1/n)` from the
    /// same generator.
    pub fn new(seed: u64) -> Result<Self> {
        Self::with(
            seed,
            &SyntheticRegression::default(),
            Activation::Relu,
            ConstraintSet::FrobeniusBall { radius: BENCH_BODY_RADIUS },
            ConstraintSet::FrobeniusBall { radius: BENCH_HEAD_RADIUS },
        )
    }

    /// Same seeding for any generator, activation and feasible sets.
    pub fn with(seed: u64, gen: &SyntheticRegression, act: Activation, body_set: ConstraintSet, head_set: ConstraintSet) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, INSTANCE_STREAM);
        let (data, _) = gen.generate(act, &mut rng)?;
        let problem = RegressionProblem::new(data, act, gen.hidden, body_set, head_set)?;
        let (m, n) = (gen.n_features, gen.hidden);
        Ok(Self {
            seed,
            problem,
            init: scaled_normal_init(m, n, &mut rng)?,
        })
    }

    /// FNV-1a over the bit patterns of the initial parameters.
    pub fn init_hash(&self) -> u64 {
        params_hash(&self.init)
    }
}

/// `M₀ ~ N(0, 1/m)`, `w₀ ~ N(0, 1/n)`.
pub fn scaled_normal_init(m: usize, n: usize, rng: &mut Rng) -> Result<LayeredParams> {
    let body = Mat::new(m, n, rng.normals(m * n))?.scaled(1.0 / (m as f64).sqrt());
    let head = Vector::new(rng.normals(n))?.scaled(1.0 / (n as f64).sqrt());
    LayeredParams::new(body, head)
}

pub fn params_hash(p: &LayeredParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in p.body.as_slice().iter().chain(p.head.as_slice()) {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn default_seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

// ---------------------------------------------------------------------------
// Three arms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThreeArmConfig {
    /// Body rate; the non-uniform arm uses `head_ratio · alpha` for the head.
    pub alpha: f64,
    pub head_ratio: f64,
    pub batch_size: usize,
    pub iters: u64,
    pub seeds: Vec<u64>,
}

impl Default for ThreeArmConfig {
    fn default() -> Self {
        Self {
            alpha: 6e-5,
            head_ratio: 5.0,
            batch_size: 16,
            iters: 1000,
            seeds: default_seeds(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeArmSeed {
    pub seed: u64,
    pub init_hash: u64,
    pub nonuniform: ArmOutcome,
    pub uniform_alpha: ArmOutcome,
    pub uniform_beta: ArmOutcome,
}

impl ThreeArmSeed {
    pub fn nonuniform_beats_alpha(&self) -> bool {
        !self.nonuniform.diverged && (self.uniform_alpha.diverged || self.nonuniform.final_loss <= self.uniform_alpha.final_loss)
    }

    pub fn beta_worse(&self) -> bool {
        self.uniform_beta.diverged || self.uniform_beta.final_loss > self.nonuniform.final_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeArmReport {
    pub config: ThreeArmConfig,
    pub rows: Vec<ThreeArmSeed>,
    pub nonuniform_beats_alpha: usize,
    pub beta_worse: usize,
}

fn arm(inst: &BenchmarkInstance, schedule: StepSchedule, cfg: &ThreeArmConfig) -> Result<(ArmOutcome, TrainTrace)> {
    let rc = RunConfig {
        iters: cfg.iters,
        batch_size: cfg.batch_size,
        eval_period: cfg.iters.max(1),
        eval: EvalOptions {
            phi: false,
            tracking: false,
            stationarity_rho_hat: None,
            prox: ProxOptions::default(),
        },
        strict: false,
        snapshots: Vec::new(),
    };
    let out = run(&inst.problem, &Method::Sgd { schedule }, inst.init.clone(), &rc, inst.seed, None)?;
    let last = out.trace.last().map(|r| (r.k, r.loss)).unwrap_or((0, f64::NAN));
    let diverged = out.trace.meta.diverged.is_some() || last.0 < cfg.iters || !last.1.is_finite();
    Ok((
        ArmOutcome {
            final_loss: last.1,
            diverged,
        },
        out.trace,
    ))
}

/// Non-uniform `(α, rα)` against uniform `α` and uniform `rα`, constant
/// rates, one shared initialization and minibatch stream per seed.
pub fn three_arm_study(cfg: &ThreeArmConfig) -> Result<ThreeArmReport> {
    if !(cfg.alpha > 0.0) || !(cfg.head_ratio > 0.0) {
        return Err(Error::InvalidArgument("alpha and head_ratio must be positive".into()));
    }
    let beta = cfg.alpha * cfg.head_ratio;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let inst = BenchmarkInstance::new(seed)?;
        let (nonuniform, _) = arm(&inst, StepSchedule::constant(cfg.alpha, beta), cfg)?;
        let (uniform_alpha, _) = arm(&inst, StepSchedule::uniform(cfg.alpha), cfg)?;
        let (uniform_beta, _) = arm(&inst, StepSchedule::uniform(beta), cfg)?;
        rows.push(ThreeArmSeed {
            seed,
            init_hash: inst.init_hash(),
            nonuniform,
            uniform_alpha,
            uniform_beta,
        });
    }
    Ok(ThreeArmReport {
        config: cfg.clone(),
        nonuniform_beats_alpha: rows.iter().filter(|r| r.nonuniform_beats_alpha()).count(),
        beta_worse: rows.iter().filter(|r| r.beta_worse()).count(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Stationarity decay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StationarityConfig {
    pub alpha0: f64,
    pub beta0: f64,
    pub batch_size: usize,
    pub iters: u64,
    pub checkpoints: u64,
    pub rho_hat: f64,
    pub prox: ProxOptions,
    pub seeds: Vec<u64>,
}

impl Default for StationarityConfig {
    fn default() -> Self {
        Self {
            alpha0: 1e-4,
            beta0: 5e-4,
            batch_size: 16,
            iters: 10_000,
            checkpoints: 100,
            rho_hat: 1e6,
            prox: ProxOptions {
                max_iters: 2000,
                ..ProxOptions::default()
            },
            seeds: default_seeds(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaritySeed {
    pub seed: u64,
    pub ks: Vec<u64>,
    /// `ρ̂²‖M_k − M̂_k‖²`; `None` where the prox solve failed.
    pub values: Vec<Option<f64>>,
    /// Running minimum over the solved checkpoints so far.
    pub min_so_far: Vec<f64>,
    pub initial: Option<f64>,
    pub final_min: f64,
    /// `final_min / initial`; infinite when the initial solve failed.
    pub ratio: f64,
    pub prox_failures: usize,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub config: StationarityConfig,
    pub rows: Vec<StationaritySeed>,
}

impl StationarityReport {
    pub fn count_below(&self, fraction: f64) -> usize {
        self.rows.iter().filter(|r| r.ratio <= fraction).count()
    }
}

/// Decaying-rate SGD on the benchmark with the stationarity surrogate
/// evaluated at evenly spaced checkpoints.
pub fn stationarity_study(cfg: &StationarityConfig) -> Result<StationarityReport> {
    if cfg.checkpoints == 0 || !cfg.iters.is_multiple_of(cfg.checkpoints) {
        return Err(Error::InvalidArgument(format!(
            "iters ({}) must be a positive multiple of checkpoints ({})",
            cfg.iters, cfg.checkpoints
        )));
    }
    let schedule = StepSchedule::thm1(cfg.alpha0, cfg.beta0);
    let rc = RunConfig {
        iters: cfg.iters,
        batch_size: cfg.batch_size,
        eval_period: cfg.iters / cfg.checkpoints,
        eval: EvalOptions {
            phi: false,
            tracking: false,
            stationarity_rho_hat: Some(cfg.rho_hat),
            prox: cfg.prox,
        },
        strict: false,
        snapshots: Vec::new(),
    };
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let inst = BenchmarkInstance::new(seed)?;
        let out = run(&inst.problem, &Method::Sgd { schedule }, inst.init.clone(), &rc, seed, None)?;
        let ks: Vec<u64> = out.trace.records.iter().map(|r| r.k).collect();
        let values: Vec<Option<f64>> = out.trace.records.iter().map(|r| r.stationarity).collect();
        let mut best = f64::INFINITY;
        let min_so_far: Vec<f64> = values
            .iter()
            .map(|v| {
                if let Some(v) = v {
                    best = best.min(*v);
                }
                best
            })
            .collect();
        let initial = values.first().copied().flatten();
        let final_min = min_so_far.last().copied().unwrap_or(f64::INFINITY);
        rows.push(StationaritySeed {
            seed,
            ratio: initial.map_or(f64::INFINITY, |i| final_min / i),
            ks,
            values,
            min_so_far,
            initial,
            final_min,
            prox_failures: out.trace.meta.prox_failures.len(),
            diverged: out.trace.meta.diverged,
        });
    }
    Ok(StationarityReport { config: cfg.clone(), rows })
}

// ---------------------------------------------------------------------------
// Toy rate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRateConfig {
    pub alpha0: f64,
    pub beta0: f64,
    pub noise_std: f64,
    pub init: (f64, f64),
    pub iters: u64,
    /// Log-spaced evaluation points in `[1, iters]`.
    pub grid_points: usize,
    pub tail_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for ToyRateConfig {
    fn default() -> Self {
        Self {
            alpha0: 160.0,
            beta0: 60.0,
            noise_std: 1.0,
            init: (1.0, 1.0),
            iters: 100_000,
            grid_points: 200,
            tail_fraction: 0.5,
            seeds: default_seeds(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRateReport {
    pub config: ToyRateConfig,
    pub schedule: StepSchedule,
    pub m_star: f64,
    pub ks: Vec<f64>,
    /// Seed average of `(M_k − M*)²`.
    pub mean_sq_err: Vec<f64>,
    pub fit: RateFit,
}

fn log_grid(iters: u64, points: usize) -> Vec<u64> {
    let top = (iters.max(1) as f64).log10();
    let mut g: Vec<u64> = (0..=points)
        .map(|i| 10f64.powf(top * i as f64 / points as f64).round() as u64)
        .map(|k| k.clamp(1, iters.max(1)))
        .collect();
    g.dedup();
    g
}

/// Two-time-scale SGD on the toy instance with the offset chosen by
/// [`StepSchedule::thm2_auto`], then a log-log fit of the seed-averaged
/// squared body error.
pub fn toy_rate_study(cfg: &ToyRateConfig) -> Result<ToyRateReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("toy rate study needs at least one seed".into()));
    }
    let problem = ToyProblem::new(cfg.noise_std)?;
    let schedule = StepSchedule::thm2_auto(cfg.alpha0, cfg.beta0);
    schedule.validate()?;
    let m_star = toy_phi_minimizer();
    let grid = log_grid(cfg.iters, cfg.grid_points);
    let mut series = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut st = OptimizerState::new(&problem, ToyProblem::params(cfg.init.0, cfg.init.1), Rng::new(seed))?;
        let mut vals = Vec::with_capacity(grid.len());
        for &k in &grid {
            while st.k < k {
                step_two_timescale(&mut st, &problem, &schedule, 1)?;
            }
            vals.push((st.params.body.get(0, 0) - m_star).powi(2));
        }
        series.push((grid.iter().map(|&k| k as f64).collect(), vals));
    }
    let (ks, mean_sq_err) = average_series(&series)?;
    let fit = fit_rate(&ks, &mean_sq_err, cfg.tail_fraction)?;
    Ok(ToyRateReport {
        config: cfg.clone(),
        schedule,
        m_star,
        ks,
        mean_sq_err,
        fit,
    })
}

// ---------------------------------------------------------------------------
// Paired landscape slices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandscapeStudyConfig {
    pub instance_seed: u64,
    /// The trajectory is the non-uniform arm of [`ThreeArmConfig`].
    pub training: ThreeArmConfig,
    pub early: Vec<u64>,
    pub direction_seeds: Vec<u64>,
    pub template: SliceTemplate,
}

impl Default for LandscapeStudyConfig {
    fn default() -> Self {
        Self {
            instance_seed: 0,
            training: ThreeArmConfig::default(),
            early: vec![0, 50, 100],
            direction_seeds: default_seeds(10),
            template: SliceTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyCount {
    pub k: u64,
    /// Direction seeds where both λ_max and ‖grad2d‖ are at least the
    /// joint-mode values.
    pub sharper: usize,
    pub of: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeStudyReport {
    pub config: LandscapeStudyConfig,
    pub final_k: u64,
    pub early: Vec<EarlyCount>,
    pub final_lambda_stackelberg: f64,
    pub final_lambda_joint: f64,
    /// `|S − J| / max(|S|, |J|)` of the direction-seed means.
    pub final_gap: f64,
    /// One entry per direction seed, checkpoints in ascending `k`.
    pub slices: Vec<Vec<CheckpointSlices>>,
}

/// Trains the non-uniform arm, keeps the early and final iterates and
/// slices each in both modes along shared random directions.
pub fn landscape_study(cfg: &LandscapeStudyConfig) -> Result<LandscapeStudyReport> {
    let t = &cfg.training;
    let final_k = t.iters;
    if cfg.early.iter().any(|&k| k > final_k) {
        return Err(Error::InvalidArgument("early checkpoints must not exceed the training length".into()));
    }
    if cfg.direction_seeds.is_empty() {
        return Err(Error::InvalidArgument("landscape study needs at least one direction seed".into()));
    }
    let inst = BenchmarkInstance::new(cfg.instance_seed)?;
    let mut keep: Vec<u64> = cfg.early.clone();
    keep.push(final_k);
    keep.sort_unstable();
    keep.dedup();
    let schedule = StepSchedule::constant(t.alpha, t.alpha * t.head_ratio);
    let mut st = OptimizerState::new(&inst.problem, inst.init.clone(), Rng::new(cfg.instance_seed))?;
    let mut checkpoints = Vec::with_capacity(keep.len());
    for &k in &keep {
        while st.k < k {
            step_two_timescale(&mut st, &inst.problem, &schedule, t.batch_size)?;
        }
        checkpoints.push((k, st.params.clone()));
    }
    let slices: Vec<Vec<CheckpointSlices>> = cfg
        .direction_seeds
        .iter()
        .map(|&ds| trajectory_study(&inst.problem, &checkpoints, &cfg.template, ds))
        .collect::<Result<_>>()?;
    let at = |k: u64| keep.iter().position(|&x| x == k).expect("checkpoint kept");
    let early = cfg
        .early
        .iter()
        .map(|&k| {
            let i = at(k);
            let sharper = slices
                .iter()
                .filter(|s| s[i].stackelberg.lambda_max >= s[i].joint.lambda_max && s[i].stackelberg.grad_norm >= s[i].joint.grad_norm)
                .count();
            EarlyCount { k, sharper, of: slices.len() }
        })
        .collect();
    let fi = at(final_k);
    let n = slices.len() as f64;
    let s_mean = slices.iter().map(|s| s[fi].stackelberg.lambda_max).sum::<f64>() / n;
    let j_mean = slices.iter().map(|s| s[fi].joint.lambda_max).sum::<f64>() / n;
    Ok(LandscapeStudyReport {
        config: cfg.clone(),
        final_k,
        early,
        final_lambda_stackelberg: s_mean,
        final_lambda_joint: j_mean,
        final_gap: (s_mean - j_mean).abs() / s_mean.abs().max(j_mean.abs()),
        slices,
    })
}

// ---------------------------------------------------------------------------
// Frozen-body TDC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrozenTdcConfig {
    /// Head and auxiliary rate scale; the body rate is zero.
    pub beta0: f64,
    /// Spread of the body around the identity.
    pub body_spread: f64,
    pub body_seed: u64,
    pub iters: u64,
    pub seeds: Vec<u64>,
}

impl Default for FrozenTdcConfig {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            body_spread: 0.1,
            body_seed: 0,
            iters: 8_000_000,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenTdcSeed {
    pub seed: u64,
    pub final_w: Vec<f64>,
    /// `‖w_K − w_TD‖₂`.
    pub error: f64,
    pub final_mspbe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenTdcReport {
    pub config: FrozenTdcConfig,
    pub schedule: TdcSchedule,
    pub w_td: Vec<f64>,
    pub rows: Vec<FrozenTdcSeed>,
}

/// One-hot states, identity activation and a fixed body near the identity
/// on the bundled five-state chain; the head should settle at the linear
/// TD fixed point of the frozen features.
pub fn frozen_tdc_study(cfg: &FrozenTdcConfig) -> Result<FrozenTdcReport> {
    let ctx = MdpContext::new(TabularMdp::chain_walk5())?;
    let ns = ctx.mdp.n_states;
    let mut rng = Rng::new(cfg.body_seed);
    let mut m = Mat::identity(ns);
    m.axpy(cfg.body_spread, &Mat::new(ns, ns, rng.normals(ns * ns))?);
    let feat = ValueFeatures::new(Mat::identity(ns), Activation::Identity, m, Vector::zeros(ns))?;
    let w_td = ctx.linear_td_fixed_point(&feat)?;
    let schedule = TdcSchedule::new(StepSchedule::thm2_auto(0.0, cfg.beta0), None)?;
    let rc = TdcRunConfig {
        iters: cfg.iters,
        eval_period: cfg.iters.max(1),
        ..TdcRunConfig::default()
    };
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let trace = crate::tdc::run_tdc(&ctx, feat.clone(), Vector::zeros(ns), &schedule, &rc, seed)?;
        let w = trace.final_features.w.clone();
        rows.push(FrozenTdcSeed {
            seed,
            error: w.dist(&w_td),
            final_mspbe: trace.records.last().map_or(f64::NAN, |r| r.mspbe),
            final_w: w.into_vec(),
        });
    }
    Ok(FrozenTdcReport {
        config: cfg.clone(),
        schedule,
        w_td: w_td.into_vec(),
        rows,
    })
}
