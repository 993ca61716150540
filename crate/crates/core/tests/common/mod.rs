#![allow(dead_code)]

use nalgebra::DVector;
use pilco_core::controller::PolicyParams;
use pilco_core::env::{InitialState, Pendulum, PendulumParams};
use pilco_core::gp::{FitConfig, GpModel, TransitionDataset};
use pilco_core::objective::{CostModel, HazardRegion};
use pilco_core::propagation::{propagate_gp, psd_sqrt_factor};
use pilco_core::training::{interact, Actor};
use pilco_core::GaussianState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// GP fitted to `episodes` random-torque pendulum episodes.
pub fn pendulum_model(episodes: usize, horizon: usize, bound: f64, seed: u64) -> GpModel {
    let cost = CostModel::pendulum(0.25);
    let region = HazardRegion::pendulum();
    let mut data = TransitionDataset::new(3, 1);
    for ep in 0..episodes {
        let mut env = Pendulum::new(
            PendulumParams::default(),
            InitialState::default(),
            seed * 1000 + ep as u64,
        )
        .unwrap();
        let run = interact(&mut env, &Actor::Random, horizon, &cost, &region).unwrap();
        for t in 0..horizon {
            data.push(&run.observations[t], &[run.actions[t]], &run.observations[t + 1])
                .unwrap();
        }
    }
    GpModel::fit(&data, bound, &FitConfig::default()).unwrap()
}

pub fn small_policy(n_basis: usize, seed: u64) -> PolicyParams {
    let init = InitialState::default().observation_moments(0.0).unwrap();
    PolicyParams::random(&init, n_basis, &[2.0], seed).unwrap()
}

/// Random smooth GP over `input_dim` inputs with `outputs` independent outputs.
pub fn random_gp(seed: u64, input_dim: usize, outputs: usize, n_points: usize, bound: f64) -> GpModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..n_points)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let freq: Vec<Vec<f64>> = (0..outputs)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            freq.iter()
                .map(|w| {
                    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    z.sin() + 0.3 * z.cos()
                })
                .collect()
        })
        .collect();
    let hypers = (0..outputs)
        .map(|_| pilco_core::gp::KernelHyperparams {
            lengthscales: (0..input_dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            signal_variance: rng.random_range(0.5..2.0),
            raw_noise: rng.random_range(-4.0..-1.0),
            noise_bound: bound,
        })
        .collect();
    assert!(
        input_dim >= outputs,
        "inputs are (state, action) with state dim = outputs"
    );
    let data = TransitionDataset::from_rows(outputs, input_dim - outputs, inputs, targets).unwrap();
    GpModel::new(&data, hypers, true).unwrap()
}

/// Random Gaussian over `dim` variables with standard deviations in roughly [0.1, 0.8].
pub fn random_gaussian(seed: u64, dim: usize) -> pilco_core::GaussianState {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mean = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.01;
    pilco_core::GaussianState::new(mean, cov).unwrap()
}

/// Independent MC estimate of the difference moments with per-component
/// standard errors: `(mean, mean_se, var, var_se)` per output.
pub struct McMoments {
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub var: Vec<f64>,
    pub var_se: Vec<f64>,
}

pub fn mc_moments(model: &GpModel, input: &GaussianState, n: usize, seed: u64) -> McMoments {
    let l = psd_sqrt_factor(input.cov());
    let e = input.dim();
    let d = model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![Vec::with_capacity(n); d];
    let mut vars = vec![Vec::with_capacity(n); d];
    for _ in 0..n {
        let z = DVector::from_fn(e, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = model.predict_point(&(input.mean() + &l * z)).unwrap();
        for a in 0..d {
            means[a].push(p.mean[a]);
            vars[a].push(p.variance[a]);
        }
    }
    let nf = n as f64;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / nf;
    let sd = |v: &[f64], m: f64| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mut out = McMoments {
        mean: vec![],
        mean_se: vec![],
        var: vec![],
        var_se: vec![],
    };
    for a in 0..d {
        let m = avg(&means[a]);
        // Total variance as the mean of per-sample terms v_i + (m_i - m)^2.
        let terms: Vec<f64> = means[a]
            .iter()
            .zip(&vars[a])
            .map(|(mi, vi)| vi + (mi - m) * (mi - m))
            .collect();
        let v = avg(&terms);
        out.mean.push(m);
        out.mean_se.push(sd(&means[a], m) / nf.sqrt());
        out.var.push(v);
        out.var_se.push(sd(&terms, v) / nf.sqrt());
    }
    out
}

/// Checks propagated means and variances against `mc_moments` at `z` standard errors.
pub fn within(model: &GpModel, input: &GaussianState, n: usize, seed: u64, z: f64) -> Result<(), String> {
    let (out, _) = propagate_gp(model, input).unwrap();
    let mc = mc_moments(model, input, n, seed);
    for a in 0..model.state_dim() {
        let dm = (out.mean()[a] - mc.mean[a]).abs();
        let dv = (out.cov()[(a, a)] - mc.var[a]).abs();
        // A floor keeps near-deterministic outputs from demanding exact equality.
        if dm > z * mc.mean_se[a] + 1e-12 || dv > z * mc.var_se[a] + 1e-12 {
            return Err(format!(
                "output {a}: mean {} vs {} (se {}), var {} vs {} (se {})",
                out.mean()[a],
                mc.mean[a],
                mc.mean_se[a],
                out.cov()[(a, a)],
                mc.var[a],
                mc.var_se[a]
            ));
        }
    }
    Ok(())
}
