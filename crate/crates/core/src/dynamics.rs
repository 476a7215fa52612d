//! Euler–Maruyama simulation of the controlled overdamped Langevin dynamics
//!
//! ```text
//! X_{n+1} = X_n + (−∇V(X_n) + σ u(X_n)) Δt + σ √Δt ξ_{n+1},   σ = √(2/β)
//! ```
//!
//! stopped at the first step whose post-step state lies in the target box.
//! All path functionals are accumulated on the fly from the pre-step state
//! `X_n`, so no path is stored.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controls::{sigma, Control, Workspace};
use crate::error::{check_dim, Error, Result};
use crate::potential::PotentialSpec;
use crate::rng::RngStream;

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Input("box needs at least one dimension".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Input("box bounds must satisfy lo < hi on every axis".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *l <= *v && *v <= *h)
    }
}

/// Running cost `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningCost {
    One,
    Zero,
}

impl RunningCost {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            RunningCost::One => 1.0,
            RunningCost::Zero => 0.0,
        }
    }
}

/// Terminal cost `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
}

impl TerminalCost {
    #[inline]
    pub fn value(self, _x: &[f64]) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
        }
    }
}

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub potential: PotentialSpec,
    pub beta: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub target: BoxSet,
    pub max_steps: u64,
    pub running_cost: RunningCost,
    pub terminal_cost: TerminalCost,
}

impl DynamicsConfig {
    /// Configuration with `f = 1`, `g = 0` and the default step cap.
    pub fn new(potential: PotentialSpec, beta: f64, dt: f64, x0: Vec<f64>, target: BoxSet) -> Result<Self> {
        let cfg = Self {
            potential,
            beta,
            dt,
            x0,
            target,
            max_steps: DEFAULT_MAX_STEPS,
            running_cost: RunningCost::One,
            terminal_cost: TerminalCost::Zero,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Result<Self> {
        self.max_steps = max_steps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        self.dt = dt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.potential.dim();
        check_dim(d, self.x0.len())?;
        check_dim(d, self.target.dim())?;
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Input("beta must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Input("time step must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Input("max_steps must be at least 1".into()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("initial state must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn sigma(&self) -> f64 {
        sigma(self.beta)
    }
}

/// Per-trajectory accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: u64,
    /// `steps · Δt`.
    pub hitting_time: f64,
    /// `f·τ + g(X_τ)` for the constant running cost `f`.
    pub work: f64,
    /// `Σ u(X_n)·ξ_{n+1} √Δt`.
    pub stoch_integral: f64,
    /// `½ Σ |u(X_n)|² Δt`.
    pub quad_cost: f64,
    /// `Σ J_θu(X_n)ᵀ u(X_n) Δt`; empty unless gradients were requested.
    pub grad_accum_a: Vec<f64>,
    /// `Σ J_θu(X_n)ᵀ ξ_{n+1} √Δt`; empty unless gradients were requested.
    pub grad_accum_b: Vec<f64>,
    pub truncated: bool,
}

impl TrajectoryRecord {
    /// `𝒲 + ½∫|u|²`, the per-trajectory cost.
    pub fn cost(&self) -> f64 {
        self.work + self.quad_cost
    }
}

/// When to stop a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// First entrance into the target set, capped at `max_steps`.
    UntilHit,
    /// Exactly `N` steps, ignoring the target set.
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub horizon: Horizon,
    pub gradients: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { horizon: Horizon::UntilHit, gradients: false }
    }
}

/// Hook called on every pre-step state.
pub trait StepObserver {
    fn observe(&mut self, step: u64, x: &[f64], u: &[f64]);

    fn finish(&mut self, _steps: u64, _x: &[f64]) {}
}

impl StepObserver for () {
    #[inline]
    fn observe(&mut self, _: u64, _: &[f64], _: &[f64]) {}
}

/// Simulates one trajectory. Gradient accumulators are filled when the
/// control is parametric.
pub fn simulate_trajectory(cfg: &DynamicsConfig, ctrl: &Control, rng: RngStream) -> Result<TrajectoryRecord> {
    check_dim(cfg.dim(), ctrl.dim())?;
    let opts = SimOptions { horizon: Horizon::UntilHit, gradients: ctrl.is_parametric() };
    simulate_observed(cfg, ctrl, rng, opts, &mut ())
}

/// Simulates `k` trajectories, trajectory `i` driven by `RngStream(seed, i)`.
pub fn simulate_batch(cfg: &DynamicsConfig, ctrl: &Control, k: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    let opts = SimOptions { horizon: Horizon::UntilHit, gradients: ctrl.is_parametric() };
    simulate_batch_with(cfg, ctrl, k, seed, opts)
}

pub fn simulate_batch_with(
    cfg: &DynamicsConfig,
    ctrl: &Control,
    k: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<Vec<TrajectoryRecord>> {
    if k == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    cfg.validate()?;
    check_dim(cfg.dim(), ctrl.dim())?;
    (0..k as u64)
        .into_par_iter()
        .map(|i| simulate_observed(cfg, ctrl, RngStream::new(seed, i), opts, &mut ()))
        .collect()
}

/// Runs `f(i)` for `i in 0..k` in parallel and returns results in index order.
pub(crate) fn par_indexed<T, F>(k: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..k as u64).into_par_iter().map(f).collect()
}

/// Core integrator shared by every sampler in the crate.
pub fn simulate_observed<O: StepObserver>(
    cfg: &DynamicsConfig,
    ctrl: &Control,
    stream: RngStream,
    opts: SimOptions,
    observer: &mut O,
) -> Result<TrajectoryRecord> {
    let d = cfg.dim();
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let sig = cfg.sigma();
    let f = cfg.running_cost.value();
    let p = if opts.gradients { ctrl.param_count() } else { 0 };
    let zero_ctrl = matches!(ctrl, Control::Zero { .. });

    let mut rng = stream.generator();
    let mut ws: Workspace = ctrl.workspace();
    let mut x = cfg.x0.clone();
    let mut grad = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut acc_a = vec![0.0; p];
    let mut acc_b = vec![0.0; p];

    let (limit, stop_on_hit) = match opts.horizon {
        Horizon::UntilHit => (cfg.max_steps, true),
        Horizon::Fixed(n) => (n, false),
    };

    let mut stoch = 0.0;
    let mut quad = 0.0;
    let mut steps = 0u64;
    let mut hit = stop_on_hit && cfg.target.contains(&x);

    while !hit && steps < limit {
        cfg.potential.gradient_into(&x, &mut grad);
        if !zero_ctrl {
            ctrl.eval_with(&x, &mut u, &mut ws);
        }
        observer.observe(steps, &x, &u);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if !zero_ctrl {
            let mut s = 0.0;
            let mut q = 0.0;
            for (ui, xii) in u.iter().zip(&xi) {
                s += ui * xii;
                q += ui * ui;
            }
            stoch += s * sqrt_dt;
            quad += 0.5 * q * dt;
        }
        if p > 0 {
            ctrl.vjp_pair_add_with(&u, dt, &mut acc_a, &xi, sqrt_dt, &mut acc_b, &mut ws);
        }
        let mut finite = true;
        for k in 0..d {
            x[k] += (-grad[k] + sig * u[k]) * dt + sig * sqrt_dt * xi[k];
            finite &= x[k].is_finite();
        }
        steps += 1;
        if !finite {
            return Err(Error::NumericalBlowup { trajectory: stream.trajectory_index, step: steps });
        }
        hit = stop_on_hit && cfg.target.contains(&x);
    }
    observer.finish(steps, &x);
    let hitting_time = steps as f64 * dt;
    // f is constant, so the running-cost sum is exactly f·τ
    let work = f * hitting_time + cfg.terminal_cost.value(&x);

    Ok(TrajectoryRecord {
        steps,
        hitting_time,
        work,
        stoch_integral: stoch,
        quad_cost: quad,
        grad_accum_a: acc_a,
        grad_accum_b: acc_b,
        truncated: stop_on_hit && !hit,
    })
}

/// Writes the visited states of one trajectory as CSV rows `step,x_1,…,x_d`.
pub fn dump_trajectory_csv<W: Write>(cfg: &DynamicsConfig, ctrl: &Control, stream: RngStream, out: W) -> Result<TrajectoryRecord> {
    struct CsvDump<W: Write> {
        out: W,
        err: Option<std::io::Error>,
    }
    impl<W: Write> CsvDump<W> {
        fn row(&mut self, step: u64, x: &[f64]) {
            if self.err.is_some() {
                return;
            }
            let mut line = step.to_string();
            for v in x {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            if let Err(e) = self.out.write_all(line.as_bytes()) {
                self.err = Some(e);
            }
        }
    }
    impl<W: Write> StepObserver for CsvDump<W> {
        fn observe(&mut self, step: u64, x: &[f64], _u: &[f64]) {
            self.row(step, x);
        }
        fn finish(&mut self, steps: u64, x: &[f64]) {
            self.row(steps, x);
        }
    }

    let mut header = String::from("step");
    for i in 1..=cfg.dim() {
        header.push_str(&format!(",x_{i}"));
    }
    header.push('\n');
    let mut dump = CsvDump { out, err: None };
    dump.out.write_all(header.as_bytes())?;
    let opts = SimOptions::default();
    let rec = simulate_observed(cfg, ctrl, stream, opts, &mut dump)?;
    if let Some(e) = dump.err {
        return Err(e.into());
    }
    dump.out.flush()?;
    Ok(rec)
}
