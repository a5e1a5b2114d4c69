//! TOML experiment configuration, validated before any compute.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fmtt_core::diagnostics::{DiscrepancySign, EstimatorOptions, RunWeighting, DEFAULT_REFINE_ROUNDS};
use fmtt_core::flowmap::{FlowMapEvaluator, StepScheme};
use fmtt_core::mixture::GaussianMixture;
use fmtt_core::ode::Tolerances;
use fmtt_core::path::MixturePath;
use fmtt_core::reward::{HutchinsonConfig, LookAhead, ProbeKind, Reward, TimeDependentReward};
use fmtt_core::schedule::{Diffusion, InterpolantKind, InterpolantSchedule};
use fmtt_core::smc::{uniform_schedule, validate_schedule, Mode, Resampler, Resampling, RunConfig, DEFAULT_ESS_FRACTION};
use fmtt_core::tilt::{DriftMultiplier, WeightScheme};
use fmtt_core::State;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] fmtt_core::Error),
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse(_) => "parse",
            ConfigError::Invalid(_) => "invalid",
            ConfigError::Core(_) => "core",
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    #[serde(default = "one")]
    pub repeats: usize,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Defaults to the standard normal in the target's dimension.
    #[serde(default)]
    pub base: Option<MixtureConfig>,
    pub target: MixtureConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Full matrices, row-major.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl MixtureConfig {
    pub fn build(&self) -> Result<GaussianMixture, ConfigError> {
        let means = self.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let mut covs = Vec::with_capacity(self.covariances.len());
        for rows in &self.covariances {
            let d = rows.len();
            if rows.iter().any(|r| r.len() != d) {
                return invalid("covariance matrices must be square");
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| rows[i][j]));
        }
        Ok(GaussianMixture::new(self.weights.clone(), means, covs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolantName {
    #[default]
    Linear,
    Trigonometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionName {
    Zero,
    Constant,
    #[default]
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub interpolant: InterpolantName,
    #[serde(default)]
    pub diffusion: DiffusionName,
    #[serde(default = "unit")]
    pub diffusion_scale: f64,
    #[serde(default)]
    pub eta_offset: f64,
    /// Uniform grid size, used when neither `times` nor `times_file` is set.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// A TOML file with a `times` array, as written by `fmtt refine`.
    #[serde(default)]
    pub times_file: Option<PathBuf>,
}

fn unit() -> f64 {
    1.0
}

fn default_steps() -> usize {
    200
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            interpolant: InterpolantName::Linear,
            diffusion: DiffusionName::Decaying,
            diffusion_scale: 1.0,
            eta_offset: 0.0,
            steps: default_steps(),
            times: None,
            times_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Sampling,
    Searching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingName {
    #[default]
    Ess,
    Every,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplerName {
    #[default]
    Systematic,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiName {
    #[default]
    Default,
    TiltedScore,
    LocalTilt,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsName {
    #[default]
    Simplified,
    Laplacian,
    Ito,
    Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeName {
    #[default]
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "one")]
    pub clones: usize,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub resampling: ResamplingName,
    #[serde(default = "default_ess")]
    pub ess_fraction: f64,
    /// Steps between selections when `resampling = "every"`.
    #[serde(default)]
    pub period: Option<usize>,
    #[serde(default)]
    pub resampler: ResamplerName,
    #[serde(default)]
    pub chi: ChiName,
    #[serde(default)]
    pub weights: WeightsName,
    #[serde(default = "default_probes")]
    pub hutchinson_probes: usize,
    #[serde(default = "default_radius")]
    pub hutchinson_radius: f64,
    #[serde(default)]
    pub probe_kind: ProbeName,
    #[serde(default = "default_inner")]
    pub expectation_samples: usize,
    /// Adds the inner average itself to the log-weight instead of its logarithm.
    #[serde(default)]
    pub expectation_paper_literal: bool,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
}

fn default_particles() -> usize {
    128
}
fn default_ess() -> f64 {
    DEFAULT_ESS_FRACTION
}
fn default_probes() -> usize {
    HutchinsonConfig::default().probes
}
fn default_radius() -> f64 {
    HutchinsonConfig::default().radius
}
fn default_inner() -> usize {
    16
}
fn default_rel_tol() -> f64 {
    1e-6
}
fn default_abs_tol() -> f64 {
    1e-8
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("every run field has a default")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Zero,
    Linear,
    Quadratic,
    LogResponsibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookAheadName {
    Naive,
    Denoiser,
    #[default]
    FlowMap,
    FlowMapSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchemeName {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// Linear coefficients; a single entry is broadcast over all coordinates.
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Target component whose log-responsibility is rewarded.
    #[serde(default)]
    pub component: Option<usize>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// Constant added to the reward.
    #[serde(default)]
    pub offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default)]
    pub kind: RewardKind,
    #[serde(default)]
    pub params: RewardParams,
    #[serde(default)]
    pub mode: LookAheadName,
    /// Steps of the few-step look-ahead.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub step_scheme: StepSchemeName,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: RewardKind::Zero,
            params: RewardParams::default(),
            mode: LookAheadName::FlowMap,
            k: None,
            step_scheme: StepSchemeName::Heun,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignName {
    #[default]
    Consistent,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingName {
    #[default]
    Previous,
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_rounds")]
    pub refine_rounds: usize,
    #[serde(default)]
    pub sign: SignName,
    #[serde(default)]
    pub weighting: WeightingName,
}

fn yes() -> bool {
    true
}
fn default_rounds() -> usize {
    DEFAULT_REFINE_ROUNDS
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { enabled: true, refine_rounds: DEFAULT_REFINE_ROUNDS, sign: SignName::Consistent, weighting: WeightingName::Previous }
    }
}

/// Scalar function whose tilted expectation is reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Coordinate { index: usize },
    /// Posterior probability of a target component.
    Responsibility { component: usize },
}

impl Default for Observable {
    fn default() -> Self {
        Observable::Coordinate { index: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub observable: Observable,
    /// Draws for the importance-sampling oracle when no closed form applies.
    #[serde(default = "default_snis")]
    pub snis_samples: usize,
}

fn default_snis() -> usize {
    1_000_000
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, observable: Observable::default(), snis_samples: default_snis() }
    }
}

/// Everything needed to run, built from a validated config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub path: Arc<MixturePath>,
    pub reward: TimeDependentReward,
    pub run: RunConfig,
    pub estimator: EstimatorOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `file`; a relative `times_file` is resolved against its directory.
    pub fn load(file: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(file).map_err(|source| ConfigError::Io { path: file.into(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(rel) = cfg.schedule.times_file.as_mut() {
            if rel.is_relative() {
                if let Some(dir) = file.parent() {
                    *rel = dir.join(&*rel);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves `times_file` into `times` so the snapshot is self-contained.
    pub fn resolved(&self) -> Result<Self, ConfigError> {
        let mut out = self.clone();
        if let Some(file) = out.schedule.times_file.take() {
            let text = std::fs::read_to_string(&file).map_err(|source| ConfigError::Io { path: file.clone(), source })?;
            let parsed: ScheduleFile = toml::from_str(&text)?;
            out.schedule.times = Some(parsed.times);
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let config = self.resolved()?;
        if config.repeats == 0 {
            return invalid("repeats must be at least 1");
        }
        let target = config.problem.target.build()?;
        let base = match &config.problem.base {
            Some(b) => b.build()?,
            None => GaussianMixture::standard(target.dim())?,
        };
        let sched = &config.schedule;
        let interp = InterpolantSchedule {
            kind: match sched.interpolant {
                InterpolantName::Linear => InterpolantKind::Linear,
                InterpolantName::Trigonometric => InterpolantKind::Trigonometric,
            },
            diffusion: match sched.diffusion {
                DiffusionName::Zero => Diffusion::Zero,
                DiffusionName::Constant => Diffusion::Constant(sched.diffusion_scale),
                DiffusionName::Decaying => Diffusion::Decaying(sched.diffusion_scale),
            },
            eta_offset: sched.eta_offset,
        };
        let path = Arc::new(MixturePath::new(base, target, interp)?);
        let dim = path.dim();

        let r = &config.run;
        let tol = Tolerances::new(r.rel_tol, r.abs_tol);
        let flow = FlowMapEvaluator::new(path.clone(), tol)?;
        let reward = build_reward(&config.reward, path.target(), dim)?;
        let mode = match config.reward.mode {
            LookAheadName::Naive => LookAhead::Naive,
            LookAheadName::Denoiser => LookAhead::Denoiser,
            LookAheadName::FlowMap => LookAhead::FlowMap,
            LookAheadName::FlowMapSteps => LookAhead::FlowMapSteps {
                steps: config.reward.k.ok_or_else(|| ConfigError::Invalid("flow_map_steps needs reward.k".into()))?,
                scheme: match config.reward.step_scheme {
                    StepSchemeName::Euler => StepScheme::Euler,
                    StepSchemeName::Heun => StepScheme::Heun,
                },
            },
        };
        if config.reward.k.is_some() && config.reward.mode != LookAheadName::FlowMapSteps {
            return invalid("reward.k only applies to mode = \"flow_map_steps\"");
        }
        let rt = TimeDependentReward::new(reward, mode, flow)?;

        let schedule = match &sched.times {
            Some(times) => times.clone(),
            None => {
                if sched.steps == 0 {
                    return invalid("schedule.steps must be positive");
                }
                uniform_schedule(sched.steps)
            }
        };
        validate_schedule(&schedule)?;
        let hutchinson = HutchinsonConfig {
            probes: r.hutchinson_probes,
            radius: r.hutchinson_radius,
            kind: match r.probe_kind {
                ProbeName::Gaussian => ProbeKind::Gaussian,
                ProbeName::Rademacher => ProbeKind::Rademacher,
            },
        };
        let run = RunConfig {
            particles: r.particles,
            clones: r.clones,
            schedule,
            resampling: match (r.resampling, r.period) {
                (ResamplingName::Ess, None) => Resampling::EssBelow(r.ess_fraction),
                (ResamplingName::Every, Some(p)) => Resampling::Every(p),
                (ResamplingName::Every, None) => return invalid("resampling = \"every\" needs run.period"),
                (ResamplingName::Never, None) => Resampling::Never,
                (_, Some(_)) => return invalid("run.period only applies to resampling = \"every\""),
            },
            resampler: match r.resampler {
                ResamplerName::Systematic => Resampler::Systematic,
                ResamplerName::Multinomial => Resampler::Multinomial,
            },
            mode: match r.mode {
                ModeName::Sampling => Mode::Sampling,
                ModeName::Searching => Mode::Searching,
            },
            chi: chi_from(r.chi),
            weights: match r.weights {
                WeightsName::Simplified => WeightScheme::Simplified,
                WeightsName::Laplacian => WeightScheme::Laplacian(hutchinson),
                WeightsName::Ito => WeightScheme::Ito,
                WeightsName::Expectation => {
                    WeightScheme::Expectation { samples: r.expectation_samples, paper_literal: r.expectation_paper_literal }
                }
            },
            seed: config.seed,
        };
        run.validate(&rt)?;
        check_observable(config.output.observable, path.target(), dim)?;
        if config.output.snis_samples < fmtt_core::oracles::MIN_SNIS_SAMPLES {
            return invalid(format!("output.snis_samples must be at least {}", fmtt_core::oracles::MIN_SNIS_SAMPLES));
        }
        let estimator = EstimatorOptions {
            sign: match config.diagnostics.sign {
                SignName::Consistent => DiscrepancySign::Consistent,
                SignName::PaperLiteral => DiscrepancySign::PaperLiteral,
            },
            weighting: match config.diagnostics.weighting {
                WeightingName::Previous => RunWeighting::Previous,
                WeightingName::Current => RunWeighting::Current,
            },
        };
        Ok(Experiment { config, path, reward: rt, run, estimator })
    }
}

pub fn chi_from(name: ChiName) -> DriftMultiplier {
    match name {
        ChiName::Default => DriftMultiplier::Default,
        ChiName::TiltedScore => DriftMultiplier::TiltedScore,
        ChiName::LocalTilt => DriftMultiplier::LocalTilt,
        ChiName::Base => DriftMultiplier::Base,
    }
}

fn build_reward(cfg: &RewardConfig, target: &GaussianMixture, dim: usize) -> Result<Reward, ConfigError> {
    let p = &cfg.params;
    let unused = |name: &str, present: bool| if present { invalid(format!("reward.params.{name} is not used by this kind")) } else { Ok(()) };
    let reward = match cfg.kind {
        RewardKind::Zero => {
            unused("lambda", p.lambda.is_some())?;
            unused("gamma", p.gamma.is_some())?;
            unused("component", p.component.is_some())?;
            unused("scale", p.scale.is_some())?;
            Reward::Zero
        }
        RewardKind::Linear => {
            unused("gamma", p.gamma.is_some())?;
            unused("component", p.component.is_some())?;
            unused("scale", p.scale.is_some())?;
            let lambda = p.lambda.as_ref().ok_or_else(|| ConfigError::Invalid("linear reward needs params.lambda".into()))?;
            let lambda: State = match lambda.len() {
                1 => DVector::from_element(dim, lambda[0]),
                n if n == dim => DVector::from_column_slice(lambda),
                n => return invalid(format!("params.lambda has {n} entries for a {dim}-dimensional problem")),
            };
            Reward::Linear(lambda)
        }
        RewardKind::Quadratic => {
            unused("lambda", p.lambda.is_some())?;
            unused("component", p.component.is_some())?;
            unused("scale", p.scale.is_some())?;
            Reward::Quadratic { gamma: p.gamma.ok_or_else(|| ConfigError::Invalid("quadratic reward needs params.gamma".into()))? }
        }
        RewardKind::LogResponsibility => {
            unused("lambda", p.lambda.is_some())?;
            unused("gamma", p.gamma.is_some())?;
            let component = p.component.ok_or_else(|| ConfigError::Invalid("log_responsibility needs params.component".into()))?;
            if component >= target.len() {
                return invalid(format!("params.component {component} but the target has {} components", target.len()));
            }
            Reward::LogResponsibility { mixture: Arc::new(target.clone()), component, scale: p.scale.unwrap_or(1.0) }
        }
    };
    Ok(match p.offset {
        Some(c) => reward.shifted(c),
        None => reward,
    })
}

fn check_observable(obs: Observable, target: &GaussianMixture, dim: usize) -> Result<(), ConfigError> {
    match obs {
        Observable::Coordinate { index } if index >= dim => invalid(format!("observable index {index} out of range")),
        Observable::Responsibility { component } if component >= target.len() => {
            invalid(format!("observable component {component} out of range"))
        }
        _ => Ok(()),
    }
}

impl Observable {
    pub fn eval(&self, target: &GaussianMixture, x: &State) -> f64 {
        match *self {
            Observable::Coordinate { index } => x[index],
            Observable::Responsibility { component } => {
                target.log_responsibilities(x).map(|l| l[component].exp()).unwrap_or(f64::NAN)
            }
        }
    }
}
