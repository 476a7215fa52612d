//! Stochastic optimal control: the Monte Carlo cost gradient, Adam, fitting
//! an initial control to a metadynamics bias and the training loop.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controls::{Control, FeedForwardNet, GaussianAnsatz};
use crate::dynamics::{simulate_batch_with, DynamicsConfig, Horizon, SimOptions, TrajectoryRecord};
use crate::error::{check_dim, Error, Result};
use crate::estimator::l2_error;
use crate::hjb::HjbSolution;
use crate::rng::derive_seed;

/// Summary statistics of one gradient batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub used: usize,
    pub truncated: usize,
    /// Reweighted estimate of `Ψ` from the same batch.
    pub psi_hat: f64,
    pub rel_error: f64,
    pub mean_hitting_time: f64,
    pub max_hitting_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    /// Componentwise standard error of `grad`.
    pub std_error: Vec<f64>,
    /// Mean of `𝒲 + ½∫|u|²`.
    pub j_hat: f64,
    pub stats: BatchStats,
}

/// Per-trajectory gradient contribution `A + (𝒲 + ½∫|u|²) B`.
pub fn trajectory_gradient(rec: &TrajectoryRecord) -> Vec<f64> {
    let w = rec.cost();
    rec.grad_accum_a.iter().zip(&rec.grad_accum_b).map(|(a, b)| a + w * b).collect()
}

fn reduce(recs: &[TrajectoryRecord], p: usize) -> Result<GradientEstimate> {
    let kept: Vec<&TrajectoryRecord> = recs.iter().filter(|r| !r.truncated).collect();
    let truncated = recs.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::GradientUnavailable(format!(
            "all {} trajectories hit the step cap; initialize the control with metadynamics",
            recs.len()
        )));
    }
    let n = kept.len() as f64;
    let mut sum = vec![0.0; p];
    let mut sq = vec![0.0; p];
    let (mut j, mut psi, mut psi2, mut tau, mut tau_max) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for r in &kept {
        for (k, g) in trajectory_gradient(r).into_iter().enumerate() {
            sum[k] += g;
            sq[k] += g * g;
        }
        j += r.cost();
        let i = (-(r.work + r.stoch_integral + r.quad_cost)).exp();
        psi += i;
        psi2 += i * i;
        tau += r.hitting_time;
        tau_max = tau_max.max(r.hitting_time);
    }
    let grad: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_error = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / n;
            let var = if n > 1.0 { ((q - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 };
            (var / n).sqrt()
        })
        .collect();
    let psi_hat = psi / n;
    let psi_var = if n > 1.0 { ((psi2 - n * psi_hat * psi_hat) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(GradientEstimate {
        grad,
        std_error,
        j_hat: j / n,
        stats: BatchStats {
            used: kept.len(),
            truncated,
            psi_hat,
            rel_error: (psi_var / n).sqrt() / psi_hat,
            mean_hitting_time: tau / n,
            max_hitting_time: tau_max,
        },
    })
}

fn require_parametric(ctrl: &Control) -> Result<()> {
    if ctrl.is_parametric() {
        Ok(())
    } else {
        Err(Error::Unsupported("gradient of a non-parametric control"))
    }
}

/// Monte Carlo gradient of the cost functional over `k` controlled
/// trajectories run until they hit the target.
pub fn grad_cost(cfg: &DynamicsConfig, ctrl: &Control, k: usize, seed: u64) -> Result<GradientEstimate> {
    require_parametric(ctrl)?;
    let recs = simulate_batch_with(cfg, ctrl, k, seed, SimOptions { horizon: Horizon::UntilHit, gradients: true })?;
    reduce(&recs, ctrl.param_count())
}

/// Same estimator over exactly `n` steps without stopping at the target; the
/// cost is `Σ (f + ½|u|²) Δt + g(X_n)`.
pub fn grad_cost_fixed_horizon(cfg: &DynamicsConfig, ctrl: &Control, n: u64, k: usize, seed: u64) -> Result<GradientEstimate> {
    require_parametric(ctrl)?;
    let recs = simulate_batch_with(cfg, ctrl, k, seed, SimOptions { horizon: Horizon::Fixed(n), gradients: true })?;
    reduce(&recs, ctrl.param_count())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const DEFAULT_LR: f64 = 0.01;

impl AdamState {
    pub fn new(p: usize, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        Ok(Self { m: vec![0.0; p], v: vec![0.0; p], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }

    /// One update of `params` against `grad`. A non-finite gradient leaves
    /// both the state and the parameters untouched.
    pub fn step(&mut self, grad: &[f64], params: &mut [f64]) -> Result<()> {
        check_dim(self.m.len(), grad.len())?;
        check_dim(self.m.len(), params.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} is {}", grad[i])));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((m, v), g), p) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad).zip(params.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, grad: &[f64], params: &mut [f64]) -> Result<()> {
    state.step(grad, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub weights: Vec<f64>,
    /// Root mean square of `|u_θ(x_j) − u_target(x_j)|` over the points.
    pub residual_rms: f64,
    /// The normal equations were singular; the minimum-norm solution was used.
    pub rank_deficient: bool,
}

const FIT_RIDGE: f64 = 1e-10;

/// Least-squares weights of a Gaussian ansatz matching `target` at `points`.
pub fn fit_init_gaussian(ansatz: &GaussianAnsatz, target: &Control, points: &[Vec<f64>]) -> Result<GaussianFit> {
    let d = ansatz.dim();
    check_dim(d, target.dim())?;
    let p = ansatz.weights().len();
    if points.is_empty() {
        return Err(Error::Input("fitting needs at least one sample point".into()));
    }
    let rows = points.len() * d;
    let mut design = DMatrix::zeros(rows, p);
    let mut y = DVector::zeros(rows);
    for (j, x) in points.iter().enumerate() {
        let b = ansatz.basis_matrix(x)?;
        design.view_mut((j * d, 0), (d, p)).copy_from(&b);
        let t = target.eval(x)?;
        y.rows_mut(j * d, d).copy_from_slice(&t);
    }
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &y;
    let svd = design.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank_deficient = p > rows || smax == 0.0 || smin <= 1e-12 * smax;
    let theta = if rank_deficient {
        let svd = design.clone().svd(true, true);
        svd.solve(&y, 1e-12 * smax.max(f64::MIN_POSITIVE)).map_err(|e| Error::Solver(e.to_string()))?
    } else {
        let jittered = &gram + DMatrix::identity(p, p) * FIT_RIDGE;
        let chol = jittered
            .cholesky()
            .ok_or_else(|| Error::Solver("normal equations are not positive definite".into()))?;
        let mut theta = chol.solve(&rhs);
        // iterative refinement removes the bias the jitter introduces
        for _ in 0..3 {
            let r = &rhs - &gram * &theta;
            theta += chol.solve(&r);
        }
        theta
    };
    let resid = &design * &theta - &y;
    let residual_rms = (resid.norm_squared() / points.len() as f64).sqrt();
    Ok(GaussianFit { weights: theta.as_slice().to_vec(), residual_rms, rank_deficient })
}

/// Where the regression points for [`fit_init_net`] come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointSampler {
    /// `n` points drawn uniformly from the box once and reused every step.
    UniformOnce { lo: Vec<f64>, hi: Vec<f64>, n: usize },
    /// `n` fresh points per step, each around a uniformly chosen center with
    /// isotropic variance.
    AroundCenters { centers: Vec<Vec<f64>>, variance: f64, n: usize },
}

impl PointSampler {
    fn dim(&self) -> Result<usize> {
        match self {
            PointSampler::UniformOnce { lo, hi, n } => {
                check_dim(lo.len(), hi.len())?;
                if *n == 0 || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(Error::Input("uniform sampler needs n ≥ 1 and lo < hi".into()));
                }
                Ok(lo.len())
            }
            PointSampler::AroundCenters { centers, variance, n } => {
                let d = centers.first().map(Vec::len).ok_or_else(|| Error::Input("no sampler centers".into()))?;
                if centers.iter().any(|c| c.len() != d) || *n == 0 || !(*variance > 0.0) {
                    return Err(Error::Input("center sampler needs equal-length centers, n ≥ 1 and variance > 0".into()));
                }
                Ok(d)
            }
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        match self {
            PointSampler::UniformOnce { lo, hi, n } => {
                (0..*n).map(|_| lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect()).collect()
            }
            PointSampler::AroundCenters { centers, variance, n } => {
                let s = variance.sqrt();
                (0..*n)
                    .map(|_| {
                        let c = &centers[rng.random_range(0..centers.len())];
                        c.iter()
                            .map(|m| {
                                let z: f64 = rng.sample(StandardNormal);
                                m + s * z
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// One deterministic draw of the sampler's points.
    pub fn points(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.dim()?;
        Ok(self.draw(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn resamples(&self) -> bool {
        matches!(self, PointSampler::AroundCenters { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetFit {
    pub net: FeedForwardNet,
    /// Mean squared error before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn regression_loss(ctrl: &Control, target_vals: &[Vec<f64>], points: &[Vec<f64>], grad: Option<&mut [f64]>) -> f64 {
    let d = ctrl.dim();
    let mut ws = ctrl.workspace();
    let mut u = vec![0.0; d];
    let mut cot = vec![0.0; d];
    let n = points.len() as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    for (x, t) in points.iter().zip(target_vals) {
        ctrl.eval_with(x, &mut u, &mut ws);
        for k in 0..d {
            cot[k] = u[k] - t[k];
            loss += cot[k] * cot[k];
        }
        if let Some(g) = grad.as_deref_mut() {
            ctrl.vjp_add_with(&cot, 2.0 / n, g, &mut ws);
        }
    }
    loss / n
}

/// Adam on the mean squared mismatch between the network and `target`.
pub fn fit_init_net(
    net: &FeedForwardNet,
    target: &Control,
    sampler: &PointSampler,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<NetFit> {
    let mut ctrl = Control::Network(net.clone());
    check_dim(ctrl.dim(), target.dim())?;
    check_dim(ctrl.dim(), sampler.dim()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = sampler.draw(&mut rng);
    let eval_targets = |pts: &[Vec<f64>]| pts.iter().map(|x| target.eval(x)).collect::<Result<Vec<_>>>();
    let mut targets = eval_targets(&points)?;
    let initial_loss = regression_loss(&ctrl, &targets, &points, None);
    let mut adam = AdamState::new(ctrl.param_count(), lr)?;
    let mut params = ctrl.params();
    let mut grad = vec![0.0; params.len()];
    for step in 0..steps {
        if step > 0 && sampler.resamples() {
            points = sampler.draw(&mut rng);
            targets = eval_targets(&points)?;
        }
        let loss = regression_loss(&ctrl, &targets, &points, Some(&mut grad));
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("initialization loss at step {step}")));
        }
        adam.step(&grad, &mut params)?;
        ctrl.set_params(&params)?;
    }
    let final_loss = regression_loss(&ctrl, &targets, &points, None);
    let Control::Network(net) = ctrl else { unreachable!() };
    Ok(NetFit { net, initial_loss, final_loss })
}

/// When training stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingRule {
    MaxSteps,
    /// Stop once the mean of `Ĵ` over the last `window` steps differs from the
    /// mean over the `window` steps before by less than `tol`, relatively.
    RelativeChange { window: usize, tol: f64 },
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule::MaxSteps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dynamics: DynamicsConfig,
    pub control: Control,
    pub batch: usize,
    pub max_steps: usize,
    pub stopping: StoppingRule,
    pub lr: f64,
    pub seed: u64,
    /// Trajectories for the L² error against a reference, when one is given.
    pub l2_samples: usize,
    /// Evaluate the L² error every this many steps (and on the last step).
    pub l2_every: usize,
}

impl TrainConfig {
    pub fn new(dynamics: DynamicsConfig, control: Control, batch: usize, max_steps: usize, seed: u64) -> Self {
        Self {
            dynamics,
            control,
            batch,
            max_steps,
            stopping: StoppingRule::MaxSteps,
            lr: DEFAULT_LR,
            seed,
            l2_samples: batch,
            l2_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        require_parametric(&self.control)?;
        check_dim(self.dynamics.dim(), self.control.dim())?;
        if self.batch == 0 {
            return Err(Error::Input("batch size must be at least 1".into()));
        }
        if let StoppingRule::RelativeChange { window, tol } = self.stopping {
            if window == 0 || !(tol > 0.0) {
                return Err(Error::Input("relative-change rule needs window ≥ 1 and tol > 0".into()));
            }
        }
        if self.l2_every == 0 || self.l2_samples == 0 {
            return Err(Error::Input("L² cadence and sample count must be positive".into()));
        }
        AdamState::new(0, self.lr).map(|_| ())
    }
}

/// One training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub j_hat: f64,
    pub psi_hat: f64,
    pub rel_error: f64,
    pub l2: Option<f64>,
    pub mean_hitting_time: f64,
    pub max_hitting_time: f64,
    pub truncated: usize,
    pub wall_seconds: f64,
    pub grad_norm: f64,
    /// The update was skipped because too many trajectories truncated.
    pub skipped: bool,
}

pub const RUN_CSV_HEADER: &str =
    "step,j_hat,psi_hat,rel_error,l2,mean_hitting_time,max_hitting_time,truncated,wall_seconds,grad_norm,skipped";

impl RunRow {
    pub fn csv_row(&self) -> String {
        let l2 = self.l2.map(|v| format!("{v:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{:?},{},{:?},{:?},{},{:?},{:?},{}",
            self.step,
            self.j_hat,
            self.psi_hat,
            self.rel_error,
            l2,
            self.mean_hitting_time,
            self.max_hitting_time,
            self.truncated,
            self.wall_seconds,
            self.grad_norm,
            self.skipped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RUN_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_row())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Moving average of `Ĵ` with the given window, one value per full window.
    pub fn smoothed_j(&self, window: usize) -> Vec<f64> {
        let j: Vec<f64> = self.rows.iter().filter(|r| !r.skipped).map(|r| r.j_hat).collect();
        if window == 0 || j.len() < window {
            return Vec::new();
        }
        j.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

/// Receives every row as it is produced, together with the control after the
/// step's update. Returning an error aborts training.
pub trait TrainObserver {
    fn on_step(&mut self, row: &RunRow, ctrl: &Control) -> Result<()>;
}

impl TrainObserver for () {
    fn on_step(&mut self, _: &RunRow, _: &Control) -> Result<()> {
        Ok(())
    }
}

fn should_stop(rule: StoppingRule, j: &[f64]) -> bool {
    match rule {
        StoppingRule::MaxSteps => false,
        StoppingRule::RelativeChange { window, tol } => {
            if j.len() < 2 * window {
                return false;
            }
            let n = j.len();
            let recent = j[n - window..].iter().sum::<f64>() / window as f64;
            let before = j[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
            (recent - before).abs() < tol * before.abs()
        }
    }
}

/// Trains the control of `tc` and returns it with the per-step record.
pub fn train(tc: &TrainConfig, reference: Option<&HjbSolution>) -> Result<(Control, RunRecord)> {
    train_with(tc, reference, &mut ())
}

pub fn train_with<O: TrainObserver>(
    tc: &TrainConfig,
    reference: Option<&HjbSolution>,
    observer: &mut O,
) -> Result<(Control, RunRecord)> {
    tc.validate()?;
    if let Some(r) = reference {
        check_dim(tc.dynamics.dim(), r.dim())?;
    }
    let start = Instant::now();
    let mut ctrl = tc.control.clone();
    let mut params = ctrl.params();
    let mut adam = AdamState::new(params.len(), tc.lr)?;
    let mut record = RunRecord::default();
    let mut j_hist = Vec::new();

    for step in 0..tc.max_steps {
        let step_seed = derive_seed(tc.seed, step as u64);
        let est = match grad_cost(&tc.dynamics, &ctrl, tc.batch, step_seed) {
            Ok(e) => e,
            Err(Error::GradientUnavailable(msg)) if step == 0 => return Err(Error::GradientUnavailable(msg)),
            Err(Error::GradientUnavailable(_)) | Err(Error::NumericalBlowup { .. }) if step > 0 => {
                grad_cost(&tc.dynamics, &ctrl, tc.batch, derive_seed(step_seed, u64::MAX))?
            }
            Err(e) => return Err(e),
        };
        let l2 = match reference {
            Some(r) if step % tc.l2_every == 0 || step + 1 == tc.max_steps => {
                Some(l2_error(&tc.dynamics, &ctrl, r, tc.l2_samples, derive_seed(step_seed, 1))?)
            }
            _ => None,
        };
        let skipped = 2 * est.stats.truncated > tc.batch;
        if !skipped {
            adam.step(&est.grad, &mut params)?;
            ctrl.set_params(&params)?;
            j_hist.push(est.j_hat);
        }
        let row = RunRow {
            step,
            j_hat: est.j_hat,
            psi_hat: est.stats.psi_hat,
            rel_error: est.stats.rel_error,
            l2,
            mean_hitting_time: est.stats.mean_hitting_time,
            max_hitting_time: est.stats.max_hitting_time,
            truncated: est.stats.truncated,
            wall_seconds: start.elapsed().as_secs_f64(),
            grad_norm: est.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            skipped,
        };
        observer.on_step(&row, &ctrl)?;
        record.rows.push(row);
        if should_stop(tc.stopping, &j_hist) {
            break;
        }
    }
    Ok((ctrl, record))
}
