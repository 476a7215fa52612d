//! Girsanov-reweighted Monte Carlo estimation of `Ψ = E[exp(−𝒲)]`.

use serde::{Deserialize, Serialize};

use crate::controls::{Control, Workspace};
use crate::dynamics::{par_indexed, simulate_observed, DynamicsConfig, SimOptions, StepObserver, TrajectoryRecord};
use crate::error::{check_dim, Error, Result};
use crate::hjb::HjbSolution;
use crate::rng::RngStream;

/// Fraction of truncated trajectories above which an estimate is unreliable.
pub const UNRELIABLE_TRUNCATION: f64 = 0.01;

pub const ESTIMATE_CSV_HEADER: &str =
    "schema,mean,variance,rel_error,ci_lo,ci_hi,k,k_var,truncated_count,mean_hitting_time,max_hitting_time,unreliable";
const ESTIMATE_CSV_SCHEMA: &str = "metais-estimate-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimate {
    pub mean: f64,
    /// Sample variance of the per-trajectory reweighted quantity.
    pub variance: f64,
    pub rel_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub k: usize,
    pub k_var: usize,
    pub truncated_count: usize,
    pub mean_hitting_time: f64,
    pub max_hitting_time: f64,
    pub unreliable: bool,
}

impl Estimate {
    /// Fills the derived fields from the sample statistics.
    pub fn from_moments(mean: f64, variance: f64, k: usize, k_var: usize) -> Self {
        let half = 1.96 * variance.sqrt() / (k as f64).sqrt();
        let rel_error = if mean > 0.0 { (variance / k as f64).sqrt() / mean } else { f64::INFINITY };
        Self {
            mean,
            variance,
            rel_error,
            ci_lo: mean - half,
            ci_hi: mean + half,
            k,
            k_var,
            truncated_count: 0,
            mean_hitting_time: 0.0,
            max_hitting_time: 0.0,
            unreliable: false,
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance / self.k as f64).sqrt()
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_lo <= other.ci_hi && other.ci_lo <= self.ci_hi
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{ESTIMATE_CSV_SCHEMA},{:?},{:?},{:?},{:?},{:?},{},{},{},{:?},{:?},{}",
            self.mean,
            self.variance,
            self.rel_error,
            self.ci_lo,
            self.ci_hi,
            self.k,
            self.k_var,
            self.truncated_count,
            self.mean_hitting_time,
            self.max_hitting_time,
            self.unreliable
        )
    }
}

/// `exp(−𝒲 − Σ u·ξ√Δt − ½ Σ |u|² Δt)` for one record.
pub fn reweighted_sample(rec: &TrajectoryRecord) -> Result<f64> {
    if rec.truncated {
        return Err(Error::TruncatedSample);
    }
    Ok(log_reweighted(rec).exp())
}

fn log_reweighted(rec: &TrajectoryRecord) -> f64 {
    -(rec.work + rec.stoch_integral + rec.quad_cost)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Estimates `Ψ(x0)` from `max(k, k_var)` trajectories: the mean uses the
/// first `k`, the variance the first `k_var`.
pub fn estimate_psi(cfg: &DynamicsConfig, ctrl: &Control, k: usize, k_var: usize, seed: u64) -> Result<Estimate> {
    if k < 2 || k_var < 2 {
        return Err(Error::Input("estimation needs K ≥ 2 and K_var ≥ 2".into()));
    }
    cfg.validate()?;
    check_dim(cfg.dim(), ctrl.dim())?;
    let total = k.max(k_var);
    let recs = par_indexed(total, |i| {
        let r = simulate_observed(cfg, ctrl, RngStream::new(seed, i), SimOptions::default(), &mut ())?;
        Ok((r.truncated, r.hitting_time, if r.truncated { f64::NAN } else { log_reweighted(&r).exp() }))
    })?;
    estimate_from_samples(&recs, k, k_var)
}

fn estimate_from_samples(recs: &[(bool, f64, f64)], k: usize, k_var: usize) -> Result<Estimate> {
    let kept = |n: usize| recs[..n].iter().filter(|r| !r.0).map(|r| r.2).collect::<Vec<_>>();
    let for_mean = kept(k);
    let for_var = kept(k_var);
    if for_mean.is_empty() || for_var.len() < 2 {
        return Err(Error::EstimationFailed(format!("all {} trajectories truncated", recs.len())));
    }
    let (mean, _) = mean_var(&for_mean);
    let (_, variance) = mean_var(&for_var);
    let mut est = Estimate::from_moments(mean, variance, for_mean.len(), for_var.len());
    let truncated = recs.iter().filter(|r| r.0).count();
    est.truncated_count = truncated;
    est.unreliable = truncated as f64 > UNRELIABLE_TRUNCATION * recs.len() as f64;
    let times: Vec<f64> = recs[..k].iter().filter(|r| !r.0).map(|r| r.1).collect();
    est.mean_hitting_time = times.iter().sum::<f64>() / times.len() as f64;
    est.max_hitting_time = times.iter().cloned().fold(0.0, f64::max);
    Ok(est)
}

struct L2Observer<'a> {
    reference: &'a Control,
    ws: Workspace,
    ustar: Vec<f64>,
    dt: f64,
    acc: f64,
}

impl StepObserver for L2Observer<'_> {
    fn observe(&mut self, _step: u64, x: &[f64], u: &[f64]) {
        self.reference.eval_with(x, &mut self.ustar, &mut self.ws);
        let s: f64 = u.iter().zip(&self.ustar).map(|(a, b)| (a - b) * (a - b)).sum();
        self.acc += s * self.dt;
    }
}

/// Monte Carlo estimate of `E[∫₀^τ |u − u*|² ds]` along trajectories driven
/// by `ctrl`, with `u*` interpolated from the reference solution.
pub fn l2_error(cfg: &DynamicsConfig, ctrl: &Control, reference: &HjbSolution, k: usize, seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    cfg.validate()?;
    check_dim(cfg.dim(), ctrl.dim())?;
    check_dim(cfg.dim(), reference.dim())?;
    let rc = reference.control()?;
    let vals = par_indexed(k, |i| {
        let mut obs = L2Observer { reference: &rc, ws: rc.workspace(), ustar: vec![0.0; cfg.dim()], dt: cfg.dt, acc: 0.0 };
        simulate_observed(cfg, ctrl, RngStream::new(seed, i), SimOptions::default(), &mut obs)?;
        Ok(obs.acc)
    })?;
    Ok(vals.iter().sum::<f64>() / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::BoxSet;
    use crate::potential::PotentialSpec;

    fn cfg(alpha: f64) -> DynamicsConfig {
        DynamicsConfig::new(
            PotentialSpec::new(vec![alpha]).unwrap(),
            1.0,
            1e-2,
            vec![-1.0],
            BoxSet::cube(1, 1.0, 3.0).unwrap(),
        )
        .unwrap()
    }

    fn record(work: f64, stoch: f64, quad: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            steps: 10,
            hitting_time: 0.1,
            work,
            stoch_integral: stoch,
            quad_cost: quad,
            grad_accum_a: vec![],
            grad_accum_b: vec![],
            truncated: false,
        }
    }

    #[test]
    fn reweighting_identity() {
        let r = record(0.7, -0.3, 0.25);
        let v = reweighted_sample(&r).unwrap();
        assert_eq!(log_reweighted(&r), -(0.7 + -0.3 + 0.25));
        assert!((v.ln() - log_reweighted(&r)).abs() <= 2.0 * f64::EPSILON);
        assert_eq!(reweighted_sample(&record(0.0, 0.0, 0.0)).unwrap(), 1.0);
        let mut t = r.clone();
        t.truncated = true;
        assert!(matches!(reweighted_sample(&t), Err(Error::TruncatedSample)));
    }

    #[test]
    fn zero_control_sample_is_exp_minus_tau() {
        let c = cfg(1.0);
        let r = crate::dynamics::simulate_trajectory(&c, &Control::zero(1), RngStream::new(3, 0)).unwrap();
        assert_eq!(reweighted_sample(&r).unwrap(), (-r.hitting_time).exp());
    }

    #[test]
    fn start_in_target_is_exact() {
        let mut c = cfg(1.0);
        c.x0 = vec![2.0];
        let e = estimate_psi(&c, &Control::zero(1), 10, 10, 1).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.variance, 0.0);
        assert_eq!(e.ci_hi - e.ci_lo, 0.0);
        assert_eq!(e.truncated_count, 0);
    }

    #[test]
    fn derived_fields_identities() {
        let e = Estimate::from_moments(0.2, 0.04, 100, 400);
        assert_eq!(e.rel_error, (0.04f64 / 100.0).sqrt() / 0.2);
        let half = 1.96 * 0.04f64.sqrt() / 100f64.sqrt();
        assert_eq!(e.ci_hi, 0.2 + half);
        assert_eq!(e.ci_lo, 0.2 - half);
    }

    #[test]
    fn mean_and_variance_use_separate_prefixes() {
        let recs: Vec<(bool, f64, f64)> = (0..6).map(|i| (false, i as f64, i as f64)).collect();
        let e = estimate_from_samples(&recs, 2, 6).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.variance, 3.5);
        assert_eq!(e.k, 2);
        assert_eq!(e.k_var, 6);
        assert_eq!(e.max_hitting_time, 1.0);
    }

    #[test]
    fn truncation_is_counted_and_flagged() {
        let mut recs: Vec<(bool, f64, f64)> = (0..100).map(|i| (false, 1.0, 0.1 * i as f64)).collect();
        recs[3] = (true, 5.0, f64::NAN);
        recs[7] = (true, 5.0, f64::NAN);
        let e = estimate_from_samples(&recs, 100, 100).unwrap();
        assert_eq!(e.truncated_count, 2);
        assert_eq!(e.k, 98);
        assert!(e.unreliable);
        assert!(e.mean.is_finite());
        let all: Vec<(bool, f64, f64)> = (0..5).map(|_| (true, 1.0, f64::NAN)).collect();
        assert!(matches!(estimate_from_samples(&all, 5, 5), Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn estimate_is_deterministic_and_serializes() {
        let c = cfg(1.0);
        let a = estimate_psi(&c, &Control::zero(1), 50, 80, 9).unwrap();
        let b = estimate_psi(&c, &Control::zero(1), 50, 80, 9).unwrap();
        assert_eq!(a, b);
        let back: Estimate = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(a.csv_row().split(',').count(), ESTIMATE_CSV_HEADER.split(',').count());
        assert!(a.mean > 0.0 && a.mean < 1.0);
    }
}
