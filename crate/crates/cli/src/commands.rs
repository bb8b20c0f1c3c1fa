//! Subcommand implementations. Every artifact is a function of the config
//! and the seeds only; nothing time- or host-dependent is written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stackstep::experiments::{
    frozen_tdc_study, landscape_study, params_hash, scaled_normal_init, stationarity_study, three_arm_study, toy_rate_study,
    ArmOutcome, BenchmarkInstance, ThreeArmSeed, INSTANCE_STREAM,
};
use stackstep::gradcheck::{gradcheck_suite, GradcheckReport};
use stackstep::landscape::{trajectory_study, SliceMode, SliceSummary};
use stackstep::numcore::{Mat, Rng, Vector};
use stackstep::optimizer::{run, validate_schedule, Method, RunConfig, ScheduleReport, StepSchedule};
use stackstep::problems::{
    estimate_constants, ClassificationProblem, LayeredParams, Objective, ProblemConstants, SyntheticClassification, SyntheticRegression,
    ToyProblem,
};
use stackstep::ratefit::{average_series, fit_rate, RateFit};
use stackstep::tdc::{run_tdc, MdpContext, TabularMdp, TdcMeta, TdcRunConfig, TdcSchedule, ValueFeatures};

use crate::config::{ExperimentConfig, FeatureSpec, MdpSource, ProblemConfig, TdcProblemSpec};
use crate::error::{CliError, CliResult};

// ---------------------------------------------------------------------------
// Files

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    s.push('\n');
    write_file(path, &s)
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Problems

pub struct Instance {
    pub objective: Box<dyn Objective>,
    pub init: LayeredParams,
}

/// The layered objective and initialization for one seed. Data and
/// initialization come from stream 1 of the seed, as in the benchmark.
pub fn build_instance(cfg: &ExperimentConfig, seed: u64) -> CliResult<Instance> {
    match &cfg.problem {
        ProblemConfig::SyntheticRegression(r) => {
            let gen = SyntheticRegression {
                n_samples: r.n_samples,
                n_features: r.n_features,
                hidden: r.hidden,
                noise_std: r.noise_std,
                lambda: r.lambda,
            };
            let inst = BenchmarkInstance::with(seed, &gen, r.activation, r.body_set.clone(), r.head_set.clone())?;
            Ok(Instance {
                objective: Box::new(inst.problem),
                init: inst.init,
            })
        }
        ProblemConfig::SyntheticClassification(c) => {
            let gen = SyntheticClassification {
                n_samples: c.n_samples,
                n_features: c.n_features,
                hidden: c.hidden,
                lambda: c.lambda,
            };
            let mut rng = Rng::with_stream(seed, INSTANCE_STREAM);
            let (data, _) = gen.generate(c.activation, &mut rng)?;
            let problem = ClassificationProblem::new(data, c.activation, c.hidden, c.body_set.clone(), c.head_set.clone())?;
            let init = scaled_normal_init(c.n_features, c.hidden, &mut rng)?;
            Ok(Instance {
                objective: Box::new(problem),
                init,
            })
        }
        ProblemConfig::Toy(t) => Ok(Instance {
            objective: Box::new(ToyProblem::new(t.noise_std)?),
            init: ToyProblem::params(t.init.0, t.init.1),
        }),
        ProblemConfig::Tdc(_) => Err(CliError::Config(
            "problem kind `tdc` has no layered objective; use the `tdc` subcommand".into(),
        )),
    }
}

fn constants_for(cfg: &ExperimentConfig, obj: &dyn Objective) -> CliResult<ProblemConstants> {
    match &cfg.constants {
        Some(c) => c.build(),
        None => {
            let mut rng = Rng::new(cfg.estimate.seed);
            Ok(estimate_constants(obj, &cfg.estimate.options(cfg.batch_size), &mut rng)?)
        }
    }
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(cfg: &ExperimentConfig, out: &Path) -> CliResult<GradcheckReport> {
    let mut gc = cfg.gradcheck.clone();
    match &cfg.problem {
        ProblemConfig::SyntheticRegression(r) => gc.regression_activation = r.activation,
        ProblemConfig::SyntheticClassification(c) => gc.classification_activation = c.activation,
        _ => {}
    }
    let report = gradcheck_suite(&gc)?;
    for c in &report.checks {
        println!(
            "{:<28} max rel err {:.3e} (tol {:.0e}) {}",
            c.name,
            c.max_rel_err,
            c.tol,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    write_json(&out.join("gradcheck.json"), &report)?;
    if !report.passed() {
        return Err(CliError::Property(format!("gradient checks failed: {}", report.failures().join(", "))));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// train

pub const ARMS: [&str; 3] = ["nonuniform", "uniform_alpha", "uniform_beta"];

/// Parameters kept along a run, for `landscape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub problem: String,
    pub seed: u64,
    pub arm: String,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: u64,
    pub params: LayeredParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArm {
    pub arm: String,
    pub schedule: StepSchedule,
    pub final_k: u64,
    pub final_loss: f64,
    pub final_phi: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSeed {
    pub seed: u64,
    pub init_hash: u64,
    pub arms: Vec<TrainArm>,
    pub nonuniform_beats_alpha: bool,
    pub beta_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub problem: String,
    pub iters: u64,
    pub schedule_report: Option<ScheduleReport>,
    pub rows: Vec<TrainSeed>,
    pub nonuniform_beats_alpha: usize,
    pub beta_worse: usize,
}

/// The configured schedule and the two uniform arms at its initial body
/// and head rates.
pub fn arm_schedules(cfg: &ExperimentConfig) -> CliResult<[StepSchedule; 3]> {
    let s = cfg.schedule.build()?;
    Ok([s, StepSchedule::uniform(s.alpha0), StepSchedule::uniform(s.beta0)])
}

fn outcome(a: &TrainArm, iters: u64) -> ArmOutcome {
    ArmOutcome {
        final_loss: a.final_loss,
        diverged: a.diverged.is_some() || a.final_k < iters || !a.final_loss.is_finite(),
    }
}

pub fn train(cfg: &ExperimentConfig, out: &Path, strict: bool) -> CliResult<TrainSummary> {
    let schedules = arm_schedules(cfg)?;
    let instances: Vec<Instance> = cfg.seeds.iter().map(|&s| build_instance(cfg, s)).collect::<CliResult<_>>()?;
    let constants = if strict || cfg.constants.is_some() {
        Some(constants_for(cfg, instances[0].objective.as_ref())?)
    } else {
        None
    };
    let mut snapshots = cfg.landscape.checkpoints.clone();
    snapshots.push(cfg.iters);
    snapshots.sort_unstable();
    snapshots.dedup();
    let rc = RunConfig {
        iters: cfg.iters,
        batch_size: cfg.batch_size,
        eval_period: cfg.eval_period,
        eval: cfg.eval.options(),
        strict,
        snapshots,
    };
    let jobs: Vec<(usize, usize)> = (0..instances.len()).flat_map(|i| (0..ARMS.len()).map(move |a| (i, a))).collect();
    let results: Vec<CliResult<TrainArm>> = jobs
        .par_iter()
        .map(|&(i, a)| {
            let seed = cfg.seeds[i];
            let inst = &instances[i];
            let method = Method::Sgd { schedule: schedules[a] };
            // Only the configured schedule is held to the theorem conditions.
            let (rc_arm, consts) = if a == 0 {
                (rc.clone(), constants.as_ref())
            } else {
                (RunConfig { strict: false, ..rc.clone() }, None)
            };
            let output = run(inst.objective.as_ref(), &method, inst.init.clone(), &rc_arm, seed, consts)?;
            let stem = out.join("train").join(format!("seed{seed}_{}", ARMS[a]));
            write_file(&stem.with_extension("csv"), &output.trace.to_csv())?;
            write_json(&stem.with_extension("meta.json"), &output.trace.meta)?;
            let traj = TrajectoryFile {
                problem: inst.objective.id(),
                seed,
                arm: ARMS[a].to_string(),
                snapshots: output.snapshots.iter().map(|(k, p)| Snapshot { k: *k, params: p.clone() }).collect(),
            };
            write_json(&stem.with_extension("trajectory.json"), &traj)?;
            let last = output.trace.last().expect("a run records its initial point");
            Ok(TrainArm {
                arm: ARMS[a].to_string(),
                schedule: schedules[a],
                final_k: last.k,
                final_loss: last.loss,
                final_phi: last.phi,
                diverged: output.trace.meta.diverged.clone(),
            })
        })
        .collect();
    let mut arms = results.into_iter();
    let mut rows = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let seed_arms: Vec<TrainArm> = arms.by_ref().take(ARMS.len()).collect::<CliResult<_>>()?;
        let cmp = ThreeArmSeed {
            seed: cfg.seeds[i],
            init_hash: params_hash(&inst.init),
            nonuniform: outcome(&seed_arms[0], cfg.iters),
            uniform_alpha: outcome(&seed_arms[1], cfg.iters),
            uniform_beta: outcome(&seed_arms[2], cfg.iters),
        };
        for a in &seed_arms {
            println!(
                "seed {} {:<14} final loss {:.6e} at k = {}{}",
                cmp.seed,
                a.arm,
                a.final_loss,
                a.final_k,
                if a.diverged.is_some() { " (diverged)" } else { "" }
            );
        }
        rows.push(TrainSeed {
            seed: cmp.seed,
            init_hash: cmp.init_hash,
            nonuniform_beats_alpha: cmp.nonuniform_beats_alpha(),
            beta_worse: cmp.beta_worse(),
            arms: seed_arms,
        });
    }
    let summary = TrainSummary {
        problem: instances[0].objective.id(),
        iters: cfg.iters,
        schedule_report: constants.as_ref().map(|c| validate_schedule(&schedules[0], c, cfg.iters)),
        nonuniform_beats_alpha: rows.iter().filter(|r| r.nonuniform_beats_alpha).count(),
        beta_worse: rows.iter().filter(|r| r.beta_worse).count(),
        rows,
    };
    println!(
        "nonuniform <= uniform_alpha in {}/{} seeds; uniform_beta worse in {}/{} seeds",
        summary.nonuniform_beats_alpha,
        summary.rows.len(),
        summary.beta_worse,
        summary.rows.len()
    );
    write_json(&out.join("train").join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// ratefit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatefitReport {
    pub files: Vec<PathBuf>,
    pub quantity: String,
    pub fit: RateFit,
}

/// `(k, value)` columns of a trace CSV. Row numbers in errors count the
/// header as row 1.
pub fn read_series(path: &Path, quantity: &str) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Config(format!("{}: no column `{name}` (columns: {})", path.display(), header.join(", "))))
    };
    let (ki, vi) = (col("k")?, col(quantity)?);
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        let cell = |j: usize, name: &str| -> CliResult<f64> {
            let c = cells.get(j).map(|c| c.trim()).unwrap_or("");
            if c.is_empty() {
                return Err(CliError::Config(format!("{} row {row}: column `{name}` is empty", path.display())));
            }
            c.parse::<f64>()
                .map_err(|_| CliError::Config(format!("{} row {row}: column `{name}` is not a number: {c:?}", path.display())))
        };
        ks.push(cell(ki, "k")?);
        vs.push(cell(vi, quantity)?);
    }
    Ok((ks, vs))
}

/// Index of the first point of the fitted tail whose value cannot be
/// logged. The tail is chosen as in `fit_rate`.
fn first_bad_tail_row(k: &[f64], v: &[f64], tail_fraction: f64) -> Option<usize> {
    let rows: Vec<usize> = (0..k.len()).filter(|&i| k[i] > 0.0).collect();
    let n_tail = ((rows.len() as f64) * tail_fraction).round() as usize;
    rows[rows.len() - n_tail.min(rows.len())..]
        .iter()
        .copied()
        .find(|&i| !(v[i] > 0.0) || !v[i].is_finite())
}

pub fn ratefit(files: &[PathBuf], quantity: &str, tail_fraction: f64, out: Option<&Path>) -> CliResult<RatefitReport> {
    if files.is_empty() {
        return Err(CliError::Config("ratefit needs at least one trace file".into()));
    }
    let series: Vec<(Vec<f64>, Vec<f64>)> = files.iter().map(|f| read_series(f, quantity)).collect::<CliResult<_>>()?;
    let (k, v) = average_series(&series)?;
    let context = if files.len() == 1 {
        files[0].display().to_string()
    } else {
        "seed-averaged series".to_string()
    };
    if let Some(row) = first_bad_tail_row(&k, &v, tail_fraction) {
        return Err(CliError::Config(format!(
            "{context} row {}: `{quantity}` = {} at k = {} is not positive; cannot take its logarithm",
            row + 2,
            v[row],
            k[row]
        )));
    }
    let fit = fit_rate(&k, &v, tail_fraction).map_err(|e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
        other => other,
    })?;
    println!(
        "slope {:.6} +- {:.6} over {} tail points (k in [{}, {}])",
        fit.slope, fit.stderr, fit.n_points, fit.k_first, fit.k_last
    );
    let report = RatefitReport {
        files: files.to_vec(),
        quantity: quantity.to_string(),
        fit,
    };
    if let Some(dir) = out {
        write_json(&dir.join("ratefit.json"), &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// landscape

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCheckpoint {
    pub k: u64,
    pub joint: SliceSummary,
    pub stackelberg: SliceSummary,
    /// Stackelberg λ_max and slice-gradient norm both at least the joint ones.
    pub stackelberg_sharper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub problem: String,
    pub seed: u64,
    pub direction_seed: u64,
    pub checkpoints: Vec<LandscapeCheckpoint>,
}

fn mode_name(m: SliceMode) -> &'static str {
    match m {
        SliceMode::Joint => "joint",
        SliceMode::Stackelberg => "stackelberg",
    }
}

fn load_trajectory(path: &Path) -> CliResult<TrajectoryFile> {
    if !path.exists() {
        return Err(CliError::Config(format!("trajectory file {} does not exist", path.display())));
    }
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn landscape(cfg: &ExperimentConfig, out: &Path) -> CliResult<LandscapeSummary> {
    let lc = &cfg.landscape;
    if lc.checkpoints.is_empty() {
        return Err(CliError::Config("landscape.checkpoints must not be empty".into()));
    }
    let (seed, inst, checkpoints) = match &lc.trajectory {
        Some(path) => {
            let traj = load_trajectory(path)?;
            let inst = build_instance(cfg, traj.seed)?;
            if inst.objective.id() != traj.problem {
                return Err(CliError::Config(format!(
                    "{} was written for {}, but the config describes {}",
                    path.display(),
                    traj.problem,
                    inst.objective.id()
                )));
            }
            let cps = lc
                .checkpoints
                .iter()
                .map(|&k| {
                    traj.snapshots.iter().find(|s| s.k == k).map(|s| (k, s.params.clone())).ok_or_else(|| {
                        let have: Vec<String> = traj.snapshots.iter().map(|s| s.k.to_string()).collect();
                        CliError::Config(format!("{} has no snapshot at k = {k} (has {})", path.display(), have.join(", ")))
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            (traj.seed, inst, cps)
        }
        None => {
            let seed = cfg.seeds[0];
            let inst = build_instance(cfg, seed)?;
            let rc = RunConfig {
                iters: *lc.checkpoints.iter().max().expect("nonempty"),
                batch_size: cfg.batch_size,
                eval_period: cfg.eval_period,
                eval: stackstep::optimizer::EvalOptions {
                    phi: false,
                    tracking: false,
                    stationarity_rho_hat: None,
                    ..Default::default()
                },
                strict: false,
                snapshots: lc.checkpoints.clone(),
            };
            let schedule = cfg.schedule.build()?;
            let output = run(inst.objective.as_ref(), &Method::Sgd { schedule }, inst.init.clone(), &rc, seed, None)?;
            if let Some(d) = &output.trace.meta.diverged {
                return Err(CliError::Numerical(format!("training for the landscape diverged: {d}")));
            }
            let cps = lc
                .checkpoints
                .iter()
                .map(|&k| output.snapshots.iter().find(|(sk, _)| *sk == k).cloned().expect("snapshot kept"))
                .collect();
            (seed, inst, cps)
        }
    };
    let slices = trajectory_study(inst.objective.as_ref(), &checkpoints, &lc.template, lc.direction_seed)?;
    let dir = out.join("landscape");
    let mut rows = Vec::with_capacity(slices.len());
    for s in &slices {
        for r in [&s.joint, &s.stackelberg] {
            write_file(&dir.join(format!("surface_k{}_{}.csv", s.k, mode_name(r.mode))), &r.surface_csv())?;
        }
        let row = LandscapeCheckpoint {
            k: s.k,
            joint: s.joint.summary(s.k),
            stackelberg: s.stackelberg.summary(s.k),
            stackelberg_sharper: s.stackelberg.lambda_max >= s.joint.lambda_max && s.stackelberg.grad_norm >= s.joint.grad_norm,
        };
        println!(
            "k = {:<6} lambda_max joint {:.6e} stackelberg {:.6e}; grad norm joint {:.6e} stackelberg {:.6e}",
            s.k, s.joint.lambda_max, s.stackelberg.lambda_max, s.joint.grad_norm, s.stackelberg.grad_norm
        );
        rows.push(row);
    }
    let summary = LandscapeSummary {
        problem: inst.objective.id(),
        seed,
        direction_seed: lc.direction_seed,
        checkpoints: rows,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// tdc

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcSeedSummary {
    pub seed: u64,
    pub final_mspbe: f64,
    pub final_value_err: f64,
    pub min_lambda_a: f64,
    pub final_w: Vec<f64>,
    /// `‖w_K − w_TD‖₂` in frozen-body mode.
    pub fixed_point_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcSummary {
    pub schedule: TdcSchedule,
    pub frozen_body: bool,
    pub w_td: Option<Vec<f64>>,
    pub rows: Vec<TdcSeedSummary>,
}

pub fn load_mdp(src: &MdpSource) -> CliResult<TabularMdp> {
    match src {
        MdpSource::ChainWalk5 => Ok(TabularMdp::chain_walk5()),
        MdpSource::File(path) => TabularMdp::from_json(&read_file(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        MdpSource::Random {
            seed,
            n_states,
            n_actions,
            gamma,
        } => Ok(TabularMdp::random(*n_states, *n_actions, *gamma, &mut Rng::new(*seed))?),
    }
}

/// State features, activation and initial body; the head starts at zero.
pub fn tdc_features(spec: &TdcProblemSpec, n_states: usize) -> CliResult<ValueFeatures> {
    let psi = match spec.features {
        FeatureSpec::OneHot => Mat::identity(n_states),
        FeatureSpec::Random { dim, seed } => Mat::new(n_states, dim, Rng::new(seed).normals(n_states * dim))?,
    };
    let m = psi.cols();
    let n = spec.hidden.unwrap_or(m);
    let mut rng = Rng::new(spec.body_seed);
    let mut body = if m == n { Mat::identity(m) } else { Mat::zeros(m, n) };
    body.axpy(spec.body_spread, &Mat::new(m, n, rng.normals(m * n))?);
    Ok(ValueFeatures::new(psi, spec.activation, body, Vector::zeros(n))?)
}

pub fn tdc(cfg: &ExperimentConfig, out: &Path) -> CliResult<TdcSummary> {
    let ProblemConfig::Tdc(spec) = &cfg.problem else {
        return Err(CliError::Config(format!("`tdc` needs problem kind `tdc`, got `{}`", cfg.problem.kind())));
    };
    let ctx = MdpContext::new(load_mdp(&spec.mdp)?)?;
    let feat = tdc_features(spec, ctx.mdp.n_states)?;
    let mut sc = cfg.schedule;
    if cfg.tdc.frozen_body {
        sc.alpha0 = 0.0;
    }
    let schedule = TdcSchedule::new(sc.build()?, sc.zeta0)?;
    let rc = TdcRunConfig {
        iters: cfg.tdc.iters,
        eval_period: cfg.tdc.eval_period,
        lambda_a_floor: cfg.tdc.lambda_a_floor,
        abort_on_lambda_a: cfg.tdc.abort_on_lambda_a,
    };
    let w_td = if cfg.tdc.frozen_body {
        Some(ctx.linear_td_fixed_point(&feat)?)
    } else {
        None
    };
    let n = feat.w.len();
    let results: Vec<CliResult<TdcSeedSummary>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let trace = run_tdc(&ctx, feat.clone(), Vector::zeros(n), &schedule, &rc, seed)?;
            let stem = out.join("tdc").join(format!("seed{seed}"));
            write_file(&stem.with_extension("csv"), &trace.to_csv())?;
            write_json::<TdcMeta>(&stem.with_extension("meta.json"), &trace.meta)?;
            let last = trace.records.last().expect("initial record");
            let w = &trace.final_features.w;
            Ok(TdcSeedSummary {
                seed,
                final_mspbe: last.mspbe,
                final_value_err: last.value_err,
                min_lambda_a: trace.meta.min_lambda_a,
                final_w: w.as_slice().to_vec(),
                fixed_point_error: w_td.as_ref().map(|t| w.dist(t)),
            })
        })
        .collect();
    let rows: Vec<TdcSeedSummary> = results.into_iter().collect::<CliResult<_>>()?;
    for r in &rows {
        let mut line = format!("seed {} final MSPBE {:.6e} value error {:.6e}", r.seed, r.final_mspbe, r.final_value_err);
        if let Some(e) = r.fixed_point_error {
            let _ = write!(line, " distance to linear TD fixed point {e:.6e}");
        }
        println!("{line}");
    }
    let summary = TdcSummary {
        schedule,
        frozen_body: cfg.tdc.frozen_body,
        w_td: w_td.map(|v| v.into_vec()),
        rows,
    };
    write_json(&out.join("tdc").join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// constants

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub problem: String,
    pub seed: u64,
    pub constants: ProblemConstants,
    pub schedule: StepSchedule,
    pub schedule_report: ScheduleReport,
}

pub fn constants(cfg: &ExperimentConfig, out: &Path) -> CliResult<ConstantsReport> {
    let seed = cfg.seeds[0];
    let inst = build_instance(cfg, seed)?;
    let c = constants_for(cfg, inst.objective.as_ref())?;
    let schedule = cfg.schedule.build()?;
    let report = ConstantsReport {
        problem: inst.objective.id(),
        seed,
        schedule_report: validate_schedule(&schedule, &c, cfg.iters),
        schedule,
        constants: c,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    write_file(&out.join("constants.json"), &(text + "\n"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// study

pub const STUDIES: [&str; 5] = ["three_arm", "stationarity", "toy_rate", "landscape", "frozen_tdc"];

/// Runs one of the seeded studies, writes its report and checks its
/// pass criterion. Returns whether it passed.
pub fn study(name: &str, cfg: &ExperimentConfig, out: &Path) -> CliResult<bool> {
    let st = &cfg.studies;
    let path = out.join(format!("study_{name}.json"));
    let (passed, line) = match name {
        "three_arm" => {
            let r = three_arm_study(&st.three_arm)?;
            write_json(&path, &r)?;
            let n = r.rows.len();
            (
                10 * r.nonuniform_beats_alpha >= 8 * n && 10 * r.beta_worse >= 6 * n,
                format!(
                    "nonuniform <= uniform_alpha in {}/{n}; uniform_beta worse in {}/{n}",
                    r.nonuniform_beats_alpha, r.beta_worse
                ),
            )
        }
        "stationarity" => {
            let r = stationarity_study(&st.stationarity)?;
            write_json(&path, &r)?;
            let n = r.rows.len();
            let below = r.count_below(0.1);
            (10 * below >= 8 * n, format!("final min <= 10% of initial in {below}/{n} seeds"))
        }
        "toy_rate" => {
            let r = toy_rate_study(&st.toy_rate)?;
            write_json(&path, &r)?;
            (
                (-0.9..=-0.5).contains(&r.fit.slope),
                format!("slope {:.4} +- {:.4}", r.fit.slope, r.fit.stderr),
            )
        }
        "landscape" => {
            let r = landscape_study(&st.landscape)?;
            write_json(&path, &r)?;
            let early_ok = r.early.iter().all(|e| 10 * e.sharper >= 7 * e.of);
            let counts: Vec<String> = r.early.iter().map(|e| format!("k={}: {}/{}", e.k, e.sharper, e.of)).collect();
            (
                early_ok && r.final_gap <= 0.25,
                format!("stackelberg sharper {}; final lambda_max gap {:.4}", counts.join(", "), r.final_gap),
            )
        }
        "frozen_tdc" => {
            let r = frozen_tdc_study(&st.frozen_tdc)?;
            write_json(&path, &r)?;
            let worst = r.rows.iter().map(|x| x.error).fold(0.0, f64::max);
            (worst <= 1e-2, format!("largest distance to the linear TD fixed point {worst:.4e}"))
        }
        other => {
            return Err(CliError::Config(format!("unknown study `{other}` (known: {})", STUDIES.join(", "))));
        }
    };
    println!("{name}: {line}: {}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(true)
    } else {
        Err(CliError::Property(format!("{name}: {line}")))
    }
}
