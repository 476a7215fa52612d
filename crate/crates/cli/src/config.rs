//! Experiment configuration.
//!
//! The format is TOML with fixed sections. Unknown keys are rejected so that
//! a typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use metais::controls::{Control, FeedForwardNet, GaussianAnsatz, DEFAULT_HIDDEN};
use metais::dynamics::{BoxSet, DynamicsConfig, RunningCost, TerminalCost, DEFAULT_MAX_STEPS};
use metais::hjb::HjbProblem;
use metais::metadynamics::MetaConfig;
use metais::potential::PotentialSpec;
use metais::soc::{PointSampler, StoppingRule, TrainConfig, DEFAULT_LR};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub potential: PotentialSection,
    pub dynamics: DynamicsSection,
    pub hjb: Option<HjbSection>,
    pub metadynamics: Option<MetaSection>,
    pub control: Option<ControlSection>,
    pub fit: Option<FitSection>,
    pub training: Option<TrainingSection>,
    pub estimation: Option<EstimationSection>,
    pub compare: Option<CompareSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub beta: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub target_lo: Vec<f64>,
    pub target_hi: Vec<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_running")]
    pub running_cost: RunningCost,
    #[serde(default = "default_terminal")]
    pub terminal_cost: TerminalCost,
}

fn default_max_steps() -> u64 {
    DEFAULT_MAX_STEPS
}

fn default_running() -> RunningCost {
    RunningCost::One
}

fn default_terminal() -> TerminalCost {
    TerminalCost::Zero
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSection {
    #[serde(default = "default_domain_lo")]
    pub domain_lo: f64,
    #[serde(default = "default_domain_hi")]
    pub domain_hi: f64,
    pub h: f64,
    /// Optional list of α vectors; one solution is written per entry.
    #[serde(default)]
    pub alpha_sweep: Vec<Vec<f64>>,
}

fn default_domain_lo() -> f64 {
    -3.0
}

fn default_domain_hi() -> f64 {
    3.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub delta: f64,
    pub eta: f64,
    pub variance: f64,
    #[serde(default = "one")]
    pub k_meta: usize,
    #[serde(default = "unit")]
    pub scale_r: f64,
    pub cv_projection: Option<Vec<usize>>,
    /// Existing bias JSON to reuse instead of running metadynamics.
    pub bias_file: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Zero,
    Network,
    Gaussian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub kind: ControlKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_per_axis")]
    pub per_axis: usize,
    #[serde(default = "default_ansatz_variance")]
    pub variance: f64,
    #[serde(default = "default_domain_lo")]
    pub lo: f64,
    #[serde(default = "default_domain_hi")]
    pub hi: f64,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_per_axis() -> usize {
    10
}

fn default_ansatz_variance() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    AroundBumps,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_fit_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_ansatz_variance")]
    pub sample_variance: f64,
}

fn default_fit_steps() -> usize {
    1000
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_points() -> usize {
    1000
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Uniform
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    MaxSteps,
    RelativeChange,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch: usize,
    pub max_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_stop")]
    pub stopping: StopKind,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Control JSON to start from; the `[control]` section with zero output is
    /// used otherwise.
    pub init_control: Option<PathBuf>,
    /// HJB solution CSV used for the L² error column.
    pub reference: Option<PathBuf>,
    #[serde(default = "one")]
    pub l2_every: usize,
    pub l2_samples: Option<usize>,
    #[serde(default)]
    pub progress_every: usize,
}

fn default_stop() -> StopKind {
    StopKind::MaxSteps
}

fn default_window() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub k: usize,
    pub k_var: Option<usize>,
    /// `"zero"`, a control JSON path, or an HJB solution CSV path.
    #[serde(default = "zero_name")]
    pub control: String,
}

fn zero_name() -> String {
    "zero".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub alphas: Vec<Vec<f64>>,
    pub methods: Vec<String>,
    /// One HJB solution CSV per entry of `alphas`, for the `optimal` method.
    #[serde(default)]
    pub references: Vec<PathBuf>,
    /// One control JSON per entry of `alphas`, for the `trained` method.
    #[serde(default)]
    pub controls: Vec<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn dynamics_for(&self, alpha: &[f64]) -> Result<DynamicsConfig, CliError> {
        let d = &self.dynamics;
        let target = BoxSet::new(d.target_lo.clone(), d.target_hi.clone())?;
        let mut cfg = DynamicsConfig::new(PotentialSpec::new(alpha.to_vec())?, d.beta, d.dt, d.x0.clone(), target)?
            .with_max_steps(d.max_steps)?;
        cfg.running_cost = d.running_cost;
        cfg.terminal_cost = d.terminal_cost;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dynamics(&self) -> Result<DynamicsConfig, CliError> {
        self.dynamics_for(&self.potential.alpha)
    }

    pub fn hjb_section(&self) -> Result<&HjbSection, CliError> {
        self.hjb.as_ref().ok_or_else(|| CliError::Config("missing [hjb] section".into()))
    }

    pub fn hjb_problem(&self, alpha: &[f64]) -> Result<HjbProblem, CliError> {
        let h = self.hjb_section()?;
        let d = alpha.len();
        let dy = self.dynamics_for(alpha)?;
        Ok(HjbProblem {
            potential: dy.potential.clone(),
            beta: dy.beta,
            domain: BoxSet::cube(d, h.domain_lo, h.domain_hi)?,
            target: dy.target.clone(),
            running_cost: dy.running_cost,
            terminal_cost: dy.terminal_cost,
            h: vec![h.h; d],
        })
    }

    pub fn meta_section(&self) -> Result<&MetaSection, CliError> {
        self.metadynamics.as_ref().ok_or_else(|| CliError::Config("missing [metadynamics] section".into()))
    }

    pub fn meta_config_for(&self, alpha: &[f64], seed: u64) -> Result<MetaConfig, CliError> {
        let m = self.meta_section()?;
        let mut cfg = MetaConfig::new(self.dynamics_for(alpha)?, m.delta, m.eta, m.variance, seed);
        if m.k_meta > 1 || m.scale_r != 1.0 {
            cfg = cfg.with_cumulative(m.k_meta, m.scale_r);
        }
        if let Some(p) = &m.cv_projection {
            cfg = cfg.with_projection(p.clone(), m.variance);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn control_section(&self) -> Result<&ControlSection, CliError> {
        self.control.as_ref().ok_or_else(|| CliError::Config("missing [control] section".into()))
    }

    /// Fresh control of the configured family representing `u ≡ 0`.
    pub fn zero_init_control(&self) -> Result<Control, CliError> {
        let c = self.control_section()?;
        let d = self.potential.alpha.len();
        Ok(match c.kind {
            ControlKind::Zero => Control::zero(d),
            ControlKind::Network => {
                let mut net = FeedForwardNet::with_hidden(d, &c.hidden, c.init_seed)?;
                net.zero_output();
                Control::Network(net)
            }
            ControlKind::Gaussian => Control::Gaussian(GaussianAnsatz::on_grid(d, c.lo, c.hi, c.per_axis, c.variance)?),
        })
    }

    pub fn training_section(&self) -> Result<&TrainingSection, CliError> {
        self.training.as_ref().ok_or_else(|| CliError::Config("missing [training] section".into()))
    }

    pub fn train_config(&self, control: Control, seed: u64) -> Result<TrainConfig, CliError> {
        let t = self.training_section()?;
        let mut tc = TrainConfig::new(self.dynamics()?, control, t.batch, t.max_steps, seed);
        tc.lr = t.lr;
        tc.stopping = match t.stopping {
            StopKind::MaxSteps => StoppingRule::MaxSteps,
            StopKind::RelativeChange => StoppingRule::RelativeChange { window: t.window, tol: t.tol },
        };
        tc.l2_every = t.l2_every;
        tc.l2_samples = t.l2_samples.unwrap_or(t.batch);
        tc.validate()?;
        Ok(tc)
    }

    pub fn fit_section(&self) -> FitSection {
        self.fit.clone().unwrap_or(FitSection {
            steps: default_fit_steps(),
            lr: default_lr(),
            points: default_points(),
            sampler: default_sampler(),
            sample_variance: default_ansatz_variance(),
        })
    }

    pub fn sampler(&self, bump_centers: &[Vec<f64>]) -> Result<PointSampler, CliError> {
        let f = self.fit_section();
        let d = self.potential.alpha.len();
        let (lo, hi) = self.control.as_ref().map_or((-3.0, 3.0), |c| (c.lo, c.hi));
        Ok(match f.sampler {
            SamplerKind::Uniform => PointSampler::UniformOnce { lo: vec![lo; d], hi: vec![hi; d], n: f.points },
            SamplerKind::AroundBumps => {
                if bump_centers.is_empty() {
                    return Err(CliError::Config("fit.sampler = \"around_bumps\" needs a non-empty bias".into()));
                }
                PointSampler::AroundCenters { centers: bump_centers.to_vec(), variance: f.sample_variance, n: f.points }
            }
        })
    }

    pub fn estimation_section(&self) -> Result<&EstimationSection, CliError> {
        self.estimation.as_ref().ok_or_else(|| CliError::Config("missing [estimation] section".into()))
    }

    pub fn compare_section(&self) -> Result<&CompareSection, CliError> {
        self.compare.as_ref().ok_or_else(|| CliError::Config("missing [compare] section".into()))
    }
}
