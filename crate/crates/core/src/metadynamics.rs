//! Adapted metadynamics: bias potentials built from Gaussian bumps deposited
//! along trajectories that are pushed out of metastable wells by the bias
//! accumulated so far.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controls::{control_from_bias, lift_cv_control, Control};
use crate::dynamics::DynamicsConfig;
use crate::error::{check_dim, Error, Result};
use crate::potential::{BiasPotential, GaussianBump};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Deposition interval δ in simulated time.
    pub delta: f64,
    /// Bump weight η.
    pub eta: f64,
    /// Bump covariance, in collective-variable space when projecting.
    pub cov: DMatrix<f64>,
    pub k_meta: usize,
    /// Per-trajectory damping r.
    pub scale_r: f64,
    pub cv_projection: Option<Vec<usize>>,
    pub dynamics: DynamicsConfig,
    pub seed: u64,
}

impl MetaConfig {
    /// Single-trajectory configuration with isotropic covariance.
    pub fn new(dynamics: DynamicsConfig, delta: f64, eta: f64, variance: f64, seed: u64) -> Self {
        let dim = dynamics.dim();
        Self {
            delta,
            eta,
            cov: DMatrix::from_diagonal_element(dim, dim, variance),
            k_meta: 1,
            scale_r: 1.0,
            cv_projection: None,
            dynamics,
            seed,
        }
    }

    pub fn with_cumulative(mut self, k_meta: usize, scale_r: f64) -> Self {
        self.k_meta = k_meta;
        self.scale_r = scale_r;
        self
    }

    /// Deposits bumps in the coordinates `projection` of the state. The
    /// covariance is reset to `variance · Id` in the projected space.
    pub fn with_projection(mut self, projection: Vec<usize>, variance: f64) -> Self {
        let s = projection.len();
        self.cov = DMatrix::from_diagonal_element(s, s, variance);
        self.cv_projection = Some(projection);
        self
    }

    /// Dimension of the space the bumps live in.
    pub fn bias_dim(&self) -> usize {
        self.cv_projection.as_ref().map_or(self.dynamics.dim(), Vec::len)
    }

    /// Steps per deposition interval.
    pub fn steps_per_deposit(&self) -> Result<u64> {
        let ratio = self.delta / self.dynamics.dt;
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-9 * n {
            return Err(Error::Input(format!(
                "deposition interval {} is not a positive multiple of the time step {}",
                self.delta, self.dynamics.dt
            )));
        }
        Ok(n as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.steps_per_deposit()?;
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Input("bump weight must be positive".into()));
        }
        if self.k_meta == 0 {
            return Err(Error::Input("at least one metadynamics trajectory is required".into()));
        }
        if self.k_meta > 1 && !(self.scale_r > 0.0 && self.scale_r < 1.0) {
            return Err(Error::Input("damping factor must lie in (0, 1)".into()));
        }
        check_dim(self.bias_dim(), self.cov.nrows())?;
        // SPD check and projection validity via the constructors
        GaussianBump::new(1.0, vec![0.0; self.bias_dim()], self.cov.clone())?;
        self.control_for(BiasPotential::empty(self.bias_dim()))?;
        Ok(())
    }

    fn control_for(&self, bias: BiasPotential) -> Result<Control> {
        let beta = self.dynamics.beta;
        match &self.cv_projection {
            None => control_from_bias(bias, beta),
            Some(p) => lift_cv_control(bias, p.clone(), beta, self.dynamics.dim()),
        }
    }

    /// The control `u = −σ⁻¹∇V_bias` induced by a bias built with this
    /// configuration.
    pub fn control(&self, bias: &BiasPotential) -> Result<Control> {
        self.control_for(bias.clone())
    }
}

/// One row of the metadynamics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub trajectory: usize,
    pub bumps: usize,
    pub hit: bool,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaResult {
    pub bias: BiasPotential,
    pub log: Vec<MetaLogRow>,
}

impl MetaResult {
    /// True when some trajectory hit the step cap before reaching the target.
    pub fn incomplete(&self) -> bool {
        self.log.iter().any(|r| !r.hit)
    }

    pub fn write_log_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "trajectory,bumps,hit,steps")?;
        for r in &self.log {
            writeln!(out, "{},{},{},{}", r.trajectory, r.bumps, r.hit, r.steps)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs one trajectory on top of `bias`, appending bumps of weight `weight`.
fn run_trajectory(cfg: &MetaConfig, bias: &mut BiasPotential, weight: f64, index: usize) -> Result<MetaLogRow> {
    let dyn_cfg = &cfg.dynamics;
    let d = dyn_cfg.dim();
    let per = cfg.steps_per_deposit()?;
    let dt = dyn_cfg.dt;
    let sqrt_dt = dt.sqrt();
    let sig = dyn_cfg.sigma();
    let proj: Vec<usize> = cfg.cv_projection.clone().unwrap_or_else(|| (0..d).collect());

    let mut rng = RngStream::new(cfg.seed, index as u64).generator();
    let mut ctrl = cfg.control(bias)?;
    let mut ws = ctrl.workspace();
    let mut x = dyn_cfg.x0.clone();
    let mut grad = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut sum = vec![0.0; proj.len()];
    let mut in_interval = 0u64;
    let mut steps = 0u64;
    let mut deposited = 0usize;
    let mut hit = dyn_cfg.target.contains(&x);

    while !hit && steps < dyn_cfg.max_steps {
        dyn_cfg.potential.gradient_into(&x, &mut grad);
        ctrl.eval_with(&x, &mut u, &mut ws);
        let mut finite = true;
        for k in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            x[k] += (-grad[k] + sig * u[k]) * dt + sig * sqrt_dt * xi;
            finite &= x[k].is_finite();
        }
        steps += 1;
        if !finite {
            return Err(Error::NumericalBlowup { trajectory: index as u64, step: steps });
        }
        hit = dyn_cfg.target.contains(&x);
        if hit {
            break;
        }
        for (s, &i) in sum.iter_mut().zip(&proj) {
            *s += x[i];
        }
        in_interval += 1;
        if in_interval == per {
            let mean: Vec<f64> = sum.iter().map(|s| s / per as f64).collect();
            bias.push(GaussianBump::new(weight, mean, cfg.cov.clone())?)?;
            deposited += 1;
            ctrl = cfg.control(bias)?;
            ws = ctrl.workspace();
            sum.iter_mut().for_each(|s| *s = 0.0);
            in_interval = 0;
        }
    }
    Ok(MetaLogRow { trajectory: index, bumps: deposited, hit, steps })
}

/// One-trajectory adapted metadynamics. `k_meta` and `scale_r` are ignored.
pub fn metadynamics_single(cfg: &MetaConfig) -> Result<MetaResult> {
    cfg.validate_single()?;
    let mut bias = BiasPotential::empty(cfg.bias_dim());
    let row = run_trajectory(cfg, &mut bias, cfg.eta, 0)?;
    Ok(MetaResult { bias, log: vec![row] })
}

/// Cumulative adapted metadynamics: trajectory `k` (from 1) starts from the
/// bias of its predecessors and deposits bumps of weight `r^{k−1} η`.
pub fn metadynamics_cumulative(cfg: &MetaConfig) -> Result<MetaResult> {
    cfg.validate()?;
    let mut bias = BiasPotential::empty(cfg.bias_dim());
    let mut log = Vec::with_capacity(cfg.k_meta);
    let mut weight = cfg.eta;
    for k in 0..cfg.k_meta {
        log.push(run_trajectory(cfg, &mut bias, weight, k)?);
        weight *= cfg.scale_r;
    }
    Ok(MetaResult { bias, log })
}

impl MetaConfig {
    fn validate_single(&self) -> Result<()> {
        let mut c = self.clone();
        c.k_meta = 1;
        c.validate()
    }
}
