//! Cost-gradient estimator against independent references.

use metais::controls::{Control, FeedForwardNet, GaussianAnsatz};
use metais::dynamics::{simulate_batch_with, BoxSet, DynamicsConfig, Horizon, SimOptions};
use metais::potential::PotentialSpec;
use metais::rng::RngStream;
use metais::soc::{grad_cost, grad_cost_fixed_horizon, trajectory_gradient, AdamState};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn oracle_setup() -> (DynamicsConfig, Control) {
    let cfg = DynamicsConfig::new(
        PotentialSpec::new(vec![1.0]).unwrap(),
        1.0,
        0.1,
        vec![-0.8],
        BoxSet::cube(1, 1.0, 3.0).unwrap(),
    )
    .unwrap();
    let cov = DMatrix::from_element(1, 1, 0.5);
    let mut g = GaussianAnsatz::new(vec![vec![-1.0], vec![0.0], vec![1.0]], vec![cov; 3]).unwrap();
    g.set_weights(&[0.5, -0.3, 0.8]).unwrap();
    (cfg, Control::Gaussian(g))
}

// Finite differences (step 1e-5) of the exact fixed-horizon cost, integrated
// with 96-node Gauss–Hermite quadrature per noise variable. Agrees with the
// 64-node rule to 2e-12.
const ORACLE_N1: [f64; 3] = [0.004067109663635771, -0.008928308434935639, -0.0014920591845379858];
const ORACLE_N2: [f64; 3] = [0.008089426135893252, -0.012512018651711363, -0.002356609341003235];

fn check_against_oracle(n: u64, oracle: &[f64; 3], seed: u64) {
    let (cfg, ctrl) = oracle_setup();
    let est = grad_cost_fixed_horizon(&cfg, &ctrl, n, 1_000_000, seed).unwrap();
    for k in 0..3 {
        let dev = (est.grad[k] - oracle[k]).abs();
        assert!(
            dev <= 3.0 * est.std_error[k],
            "N={n} component {k}: mc {} oracle {} se {}",
            est.grad[k],
            oracle[k],
            est.std_error[k]
        );
    }
}

#[test]
fn one_step_gradient_matches_quadrature() {
    check_against_oracle(1, &ORACLE_N1, 11);
}

#[test]
fn two_step_gradient_matches_quadrature() {
    check_against_oracle(2, &ORACLE_N2, 12);
}

/// Replays the trajectory from its random stream, stores the whole path and
/// applies the gradient formula to the stored states.
fn stored_path_gradient(cfg: &DynamicsConfig, ctrl: &Control, stream: RngStream) -> Vec<f64> {
    let d = cfg.dim();
    let dt = cfg.dt;
    let sig = cfg.sigma();
    let mut rng = stream.generator();
    let mut xs = vec![cfg.x0.clone()];
    let mut xis = Vec::new();
    let mut us = Vec::new();
    let mut x = cfg.x0.clone();
    while !cfg.target.contains(&x) {
        let g = cfg.potential.gradient(&x).unwrap();
        let u = ctrl.eval(&x).unwrap();
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for k in 0..d {
            x[k] += (-g[k] + sig * u[k]) * dt + sig * dt.sqrt() * xi[k];
        }
        xs.push(x.clone());
        xis.push(xi);
        us.push(u);
    }
    let steps = xis.len();
    let work = steps as f64 * dt;
    let quad: f64 = us.iter().map(|u| 0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt).sum();
    let p = ctrl.param_count();
    let mut grad = vec![0.0; p];
    for n in 0..steps {
        let a = ctrl.param_vjp(&xs[n], &us[n]).unwrap();
        let b = ctrl.param_vjp(&xs[n], &xis[n]).unwrap();
        for i in 0..p {
            grad[i] += a[i] * dt + (work + quad) * b[i] * dt.sqrt();
        }
    }
    grad
}

#[test]
fn streaming_accumulators_match_stored_paths() {
    let cfg = DynamicsConfig::new(
        PotentialSpec::new(vec![2.0]).unwrap(),
        1.0,
        0.01,
        vec![-1.0],
        BoxSet::cube(1, 1.0, 3.0).unwrap(),
    )
    .unwrap();
    let mut net = FeedForwardNet::with_hidden(1, &[6, 5], 4).unwrap();
    let mut params = net.params().to_vec();
    params.iter_mut().for_each(|v| *v *= 0.5);
    net = FeedForwardNet::from_params(net.widths().to_vec(), params).unwrap();
    let ctrl = Control::Network(net);
    let seed = 31;
    let recs =
        simulate_batch_with(&cfg, &ctrl, 8, seed, SimOptions { horizon: Horizon::UntilHit, gradients: true }).unwrap();
    for (i, rec) in recs.iter().enumerate() {
        assert!(!rec.truncated);
        let streamed = trajectory_gradient(rec);
        let stored = stored_path_gradient(&cfg, &ctrl, RngStream::new(seed, i as u64));
        let scale = stored.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in streamed.iter().zip(&stored) {
            assert!((a - b).abs() <= 1e-12 * scale, "trajectory {i}: {a} vs {b}");
        }
    }
}

#[test]
fn batch_gradient_is_mean_of_trajectory_gradients() {
    let (cfg, ctrl) = oracle_setup();
    let est = grad_cost(&cfg, &ctrl, 16, 5).unwrap();
    let recs =
        simulate_batch_with(&cfg, &ctrl, 16, 5, SimOptions { horizon: Horizon::UntilHit, gradients: true }).unwrap();
    let mut mean = vec![0.0; 3];
    for r in &recs {
        for (m, g) in mean.iter_mut().zip(trajectory_gradient(r)) {
            *m += g / 16.0;
        }
    }
    for (a, b) in est.grad.iter().zip(&mean) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
    }
    let j: f64 = recs.iter().map(|r| r.cost()).sum::<f64>() / 16.0;
    assert!((est.j_hat - j).abs() <= 1e-12 * j);
}

// Parameters after each of five Adam steps (lr 0.01, β₁ 0.9, β₂ 0.999,
// ε 1e-8) from θ₀ = (1, −0.5), recurrences evaluated independently.
const ADAM_GRADS: [[f64; 2]; 5] = [[0.5, -2.0], [0.1, -1.0], [-0.3, 0.0], [1.2, 3.0], [0.0, -0.5]];
const ADAM_TABLE: [[f64; 2]; 5] = [
    [0.9900000002, -0.49000000005],
    [0.9819695906384652, -0.480678203720851],
    [0.9798624611763509, -0.47347242815120455],
    [0.9738864637028966, -0.4746098882918675],
    [0.968835383154039, -0.47483958561959355],
];

#[test]
fn adam_matches_hand_table() {
    let mut state = AdamState::new(2, 0.01).unwrap();
    let mut p = vec![1.0, -0.5];
    for (g, want) in ADAM_GRADS.iter().zip(&ADAM_TABLE) {
        state.step(g, &mut p).unwrap();
        for k in 0..2 {
            assert!((p[k] - want[k]).abs() <= 1e-14, "step {}: {} vs {}", state.t, p[k], want[k]);
        }
    }
    assert_eq!(state.t, 5);
}
