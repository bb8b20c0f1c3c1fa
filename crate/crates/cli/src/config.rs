//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stackstep::experiments::{
    FrozenTdcConfig, LandscapeStudyConfig, StationarityConfig, ThreeArmConfig, ToyRateConfig, BENCH_BODY_RADIUS, BENCH_HEAD_RADIUS,
};
use stackstep::gradcheck::GradcheckConfig;
use stackstep::landscape::SliceTemplate;
use stackstep::optimizer::{EvalOptions, ScheduleKind, StepSchedule};
use stackstep::problems::{Activation, ConstraintSet, EstimateOptions, ProblemConstants};
use stackstep::ratefit::DEFAULT_TAIL_FRACTION;
use stackstep::stackelberg::ProxOptions;
use stackstep::tdc::LAMBDA_A_FLOOR;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; must equal [`SCHEMA_VERSION`].
    pub schema_version: Option<u32>,
    pub problem: ProblemConfig,
    pub schedule: ScheduleConfig,
    pub iters: u64,
    pub batch_size: usize,
    pub eval_period: u64,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    /// Replaces the empirical estimates when present.
    pub constants: Option<ConstantsConfig>,
    pub estimate: EstimateConfig,
    pub output_dir: PathBuf,
    pub gradcheck: GradcheckConfig,
    pub ratefit: RatefitConfig,
    pub landscape: LandscapeConfig,
    pub tdc: TdcConfig,
    pub studies: StudiesConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: None,
            problem: ProblemConfig::default(),
            schedule: ScheduleConfig::default(),
            iters: 1000,
            batch_size: 16,
            eval_period: 10,
            eval: EvalConfig::default(),
            seeds: vec![0],
            constants: None,
            estimate: EstimateConfig::default(),
            output_dir: PathBuf::from("out"),
            gradcheck: GradcheckConfig::default(),
            ratefit: RatefitConfig::default(),
            landscape: LandscapeConfig::default(),
            tdc: TdcConfig::default(),
            studies: StudiesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    SyntheticRegression(RegressionSpec),
    SyntheticClassification(ClassificationSpec),
    Toy(ToySpec),
    Tdc(TdcProblemSpec),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::SyntheticRegression(RegressionSpec::default())
    }
}

impl ProblemConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProblemConfig::SyntheticRegression(_) => "synthetic_regression",
            ProblemConfig::SyntheticClassification(_) => "synthetic_classification",
            ProblemConfig::Toy(_) => "toy",
            ProblemConfig::Tdc(_) => "tdc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub noise_std: f64,
    pub lambda: f64,
    pub activation: Activation,
    pub body_set: ConstraintSet,
    pub head_set: ConstraintSet,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            n_samples: 128,
            n_features: 20,
            hidden: 10,
            noise_std: 1.0,
            lambda: 0.1,
            activation: Activation::Relu,
            body_set: ConstraintSet::FrobeniusBall { radius: BENCH_BODY_RADIUS },
            head_set: ConstraintSet::FrobeniusBall { radius: BENCH_HEAD_RADIUS },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub activation: Activation,
    pub body_set: ConstraintSet,
    pub head_set: ConstraintSet,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            n_samples: 128,
            n_features: 20,
            hidden: 10,
            lambda: 0.1,
            activation: Activation::Tanh,
            body_set: ConstraintSet::FrobeniusBall { radius: BENCH_BODY_RADIUS },
            head_set: ConstraintSet::FrobeniusBall { radius: BENCH_HEAD_RADIUS },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub noise_std: f64,
    /// `(M₀, w₀)`.
    pub init: (f64, f64),
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            noise_std: 1.0,
            init: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpSource {
    ChainWalk5,
    File(PathBuf),
    Random { seed: u64, n_states: usize, n_actions: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    OneHot,
    /// i.i.d. standard normal state features.
    Random { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcProblemSpec {
    pub mdp: MdpSource,
    pub features: FeatureSpec,
    pub activation: Activation,
    /// Width of the body; defaults to the feature dimension.
    pub hidden: Option<usize>,
    /// The initial body is `I + spread·N(0,1)` when square, else `spread·N(0,1)`.
    pub body_spread: f64,
    pub body_seed: u64,
}

impl Default for TdcProblemSpec {
    fn default() -> Self {
        Self {
            mdp: MdpSource::ChainWalk5,
            features: FeatureSpec::OneHot,
            activation: Activation::Tanh,
            hidden: None,
            body_spread: 0.1,
            body_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub alpha0: f64,
    pub beta0: f64,
    /// Offset for `thm2`; chosen automatically when absent.
    pub h: Option<f64>,
    /// TDC auxiliary rate scale; defaults to `beta0`.
    pub zeta0: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            alpha0: 6e-5,
            beta0: 3e-4,
            h: None,
            zeta0: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> CliResult<StepSchedule> {
        let s = match self.kind {
            ScheduleKind::Thm1 => StepSchedule::thm1(self.alpha0, self.beta0),
            ScheduleKind::Thm2 => match self.h {
                Some(h) => StepSchedule::thm2(self.alpha0, self.beta0, h),
                None => StepSchedule::thm2_auto(self.alpha0, self.beta0),
            },
            ScheduleKind::Constant => StepSchedule::constant(self.alpha0, self.beta0),
            ScheduleKind::Uniform => StepSchedule::uniform(self.alpha0),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub phi: bool,
    pub tracking: bool,
    pub stationarity_rho_hat: Option<f64>,
    pub prox_max_iters: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            phi: true,
            tracking: true,
            stationarity_rho_hat: None,
            prox_max_iters: None,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        let mut prox = ProxOptions::default();
        if let Some(n) = self.prox_max_iters {
            prox.max_iters = n;
        }
        EvalOptions {
            phi: self.phi,
            tracking: self.tracking,
            stationarity_rho_hat: self.stationarity_rho_hat,
            prox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub lambda: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub rho_hat: f64,
    #[serde(default)]
    pub lambda_phi: Option<f64>,
}

impl ConstantsConfig {
    pub fn build(&self) -> CliResult<ProblemConstants> {
        Ok(ProblemConstants::user(self.lambda, self.l, self.sigma2, self.rho, self.rho_hat, self.lambda_phi)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub n_points: usize,
    /// Defaults to the run's batch size.
    pub batch_size: Option<usize>,
    pub segment_len: f64,
    pub pair_len: f64,
    pub rho_hat_factor: f64,
    pub rho_hat_fallback: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        let d = EstimateOptions::default();
        Self {
            n_points: d.n_points,
            batch_size: None,
            segment_len: d.segment_len,
            pair_len: d.pair_len,
            rho_hat_factor: d.rho_hat_factor,
            rho_hat_fallback: d.rho_hat_fallback,
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn options(&self, run_batch: usize) -> EstimateOptions {
        EstimateOptions {
            n_points: self.n_points,
            batch_size: self.batch_size.unwrap_or(run_batch),
            segment_len: self.segment_len,
            pair_len: self.pair_len,
            rho_hat_factor: self.rho_hat_factor,
            rho_hat_fallback: self.rho_hat_fallback,
            ..EstimateOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatefitConfig {
    pub traces: Vec<PathBuf>,
    /// Column to fit.
    pub quantity: String,
    pub tail_fraction: f64,
}

impl Default for RatefitConfig {
    fn default() -> Self {
        Self {
            traces: Vec::new(),
            quantity: "loss".into(),
            tail_fraction: DEFAULT_TAIL_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    /// A trajectory written by `train`; without it the first seed is
    /// trained here with the configured schedule.
    pub trajectory: Option<PathBuf>,
    pub checkpoints: Vec<u64>,
    pub direction_seed: u64,
    pub template: SliceTemplate,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            trajectory: None,
            checkpoints: vec![0, 50, 100],
            direction_seed: 0,
            template: SliceTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcConfig {
    pub iters: u64,
    pub eval_period: u64,
    pub lambda_a_floor: f64,
    pub abort_on_lambda_a: bool,
    /// Body rate forced to zero; the report adds the distance to the
    /// linear TD fixed point.
    pub frozen_body: bool,
}

impl Default for TdcConfig {
    fn default() -> Self {
        Self {
            iters: 100_000,
            eval_period: 1000,
            lambda_a_floor: LAMBDA_A_FLOOR,
            abort_on_lambda_a: true,
            frozen_body: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StudiesConfig {
    pub three_arm: ThreeArmConfig,
    pub stationarity: StationarityConfig,
    pub toy_rate: ToyRateConfig,
    pub landscape: LandscapeStudyConfig,
    pub frozen_tdc: FrozenTdcConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that need no computation: schema, ranges and the activation
    /// rules of each problem.
    pub fn validate(&self) -> CliResult<()> {
        match self.schema_version {
            None => return Err(CliError::Config("missing field `schema_version`".into())),
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(CliError::Config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"))),
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.eval_period == 0 {
            return Err(CliError::Config("eval_period must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        match &self.problem {
            ProblemConfig::SyntheticRegression(r) => {
                r.body_set.validate()?;
                r.head_set.validate()?;
            }
            ProblemConfig::SyntheticClassification(c) => {
                c.activation.require_smooth("logistic classification")?;
                c.body_set.validate()?;
                c.head_set.validate()?;
            }
            ProblemConfig::Toy(t) => {
                if !(t.noise_std >= 0.0) {
                    return Err(CliError::Config(format!("toy noise_std must be >= 0, got {}", t.noise_std)));
                }
            }
            ProblemConfig::Tdc(t) => {
                t.activation.require_smooth("TDC value features")?;
            }
        }
        self.schedule.build()?;
        if !(self.ratefit.tail_fraction > 0.0 && self.ratefit.tail_fraction <= 1.0) {
            return Err(CliError::Config(format!("ratefit.tail_fraction must lie in (0, 1], got {}", self.ratefit.tail_fraction)));
        }
        if self.tdc.eval_period == 0 {
            return Err(CliError::Config("tdc.eval_period must be positive".into()));
        }
        if let Some(c) = &self.constants {
            c.build()?;
        }
        Ok(())
    }

    /// `--seeds` replaces every seed list in the document.
    pub fn override_seeds(&mut self, seeds: Vec<u64>) {
        self.studies.three_arm.seeds = seeds.clone();
        self.studies.stationarity.seeds = seeds.clone();
        self.studies.toy_rate.seeds = seeds.clone();
        self.studies.frozen_tdc.seeds = seeds.clone();
        self.seeds = seeds;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_gets_benchmark_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg.problem, ProblemConfig::SyntheticRegression(RegressionSpec::default()));
        assert_eq!(cfg.schedule.kind, ScheduleKind::Constant);
    }

    #[test]
    fn schema_version_is_required() {
        let e = ExperimentConfig::from_json("{}").unwrap_err();
        assert!(e.to_string().contains("schema_version"), "{e}");
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "iter": 5}"#).is_err());
        let e = ExperimentConfig::from_json(r#"{"schema_version": 1, "problem": {"kind": "toy", "nois_std": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("nois_std"), "{e}");
    }

    #[test]
    fn relu_classification_is_a_config_error() {
        let e = ExperimentConfig::from_json(r#"{"schema_version": 1, "problem": {"kind": "synthetic_classification", "activation": "relu"}}"#)
            .unwrap_err();
        assert_eq!(e.code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn problem_variants_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"schema_version": 1,
                "problem": {"kind": "tdc", "mdp": {"random": {"seed": 3, "n_states": 4, "n_actions": 2, "gamma": 0.8}},
                            "features": {"random": {"dim": 3, "seed": 1}}}}"#,
        )
        .unwrap();
        match cfg.problem {
            ProblemConfig::Tdc(t) => assert_eq!(t.features, FeatureSpec::Random { dim: 3, seed: 1 }),
            other => panic!("{other:?}"),
        }
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "problem": {"kind": "toy", "init": [2.0, 0.5]}}"#).unwrap();
        assert_eq!(cfg.problem, ProblemConfig::Toy(ToySpec { noise_std: 1.0, init: (2.0, 0.5) }));
    }

    #[test]
    fn thm2_without_offset_is_automatic() {
        let s = ScheduleConfig {
            kind: ScheduleKind::Thm2,
            alpha0: 160.0,
            beta0: 60.0,
            h: None,
            zeta0: None,
        };
        assert_eq!(s.build().unwrap().h, StepSchedule::auto_h(160.0, 60.0));
    }

    #[test]
    fn seed_override_reaches_studies() {
        let mut cfg = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        cfg.override_seeds(vec![7, 8]);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.studies.three_arm.seeds, vec![7, 8]);
        assert_eq!(cfg.studies.toy_rate.seeds, vec![7, 8]);
    }
}
