use std::f64::consts::{FRAC_PI_2, PI};

use pilco_core::env::{
    decode, encode, estimate_lipschitz, pendulum_step, perturb, sample_relative_perturbation, synthetic_1d_step,
    InitialState, ParametricSystem, Pendulum, PendulumFamily, PendulumParams, PerturbationSpec, Synthetic1d,
};
use pilco_core::training::{RunState, TrainConfig};
use pilco_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hanging_rest_state_is_exactly_invariant() {
    let p = PendulumParams::default();
    let mut s = [PI, 0.0];
    for _ in 0..1000 {
        s = pendulum_step(&p, s, 0.0);
    }
    assert_eq!(s, [PI, 0.0]);
    let mut env = Pendulum::new(
        p,
        InitialState {
            angle: PI,
            angle_std: 0.0,
            velocity_std: 0.0,
        },
        1,
    )
    .unwrap();
    env.reset();
    for _ in 0..50 {
        env.step(0.0);
    }
    assert_eq!(env.state(), [PI, 0.0]);
}

#[test]
fn full_torque_from_rest_gives_closed_form_velocity() {
    let p = PendulumParams::default();
    let s = pendulum_step(&p, [PI, 0.0], p.u_max);
    assert!((s[1] - p.dt * 3.0 * p.u_max / (p.mass * p.length * p.length)).abs() < 1e-15);
    // Torque beyond the limit is clipped.
    assert_eq!(pendulum_step(&p, [PI, 0.0], 50.0), s);
}

#[test]
fn doubling_length_rescales_both_terms() {
    let p = PendulumParams::default();
    let q = PendulumParams {
        length: 2.0 * p.length,
        ..p.clone()
    };
    let theta = 0.7;
    let gravity = |pp: &PendulumParams| pp.angular_acceleration(theta, 0.0);
    let torque = |pp: &PendulumParams| pp.angular_acceleration(0.0, 1.3);
    assert!((gravity(&q) - 0.5 * gravity(&p)).abs() < 1e-12);
    assert!((torque(&q) - 0.25 * torque(&p)).abs() < 1e-12);
    assert!((gravity(&p) - 1.5 * p.gravity / p.length * theta.sin()).abs() < 1e-12);
}

#[test]
fn velocity_is_clipped() {
    let p = PendulumParams::default();
    let s = pendulum_step(&p, [0.3, 7.99], 2.0);
    assert_eq!(s[1], 8.0);
    let s = pendulum_step(&p, [-0.3, -7.99], -2.0);
    assert_eq!(s[1], -8.0);
}

#[test]
fn zero_perturbation_is_identity() {
    let p = PendulumParams::default();
    let q = perturb(
        &p,
        &PerturbationSpec {
            sigma_perturb: 0.0,
            seed: 5,
        },
    )
    .unwrap();
    assert_eq!(q, p);
    assert_eq!(q.obs_noise_std, 0.0);
    assert!(perturb(
        &p,
        &PerturbationSpec {
            sigma_perturb: -0.1,
            seed: 5
        }
    )
    .is_err());
}

#[test]
fn perturbation_is_seeded_and_sets_observation_noise() {
    let p = PendulumParams::default();
    let spec = PerturbationSpec {
        sigma_perturb: 0.15,
        seed: 42,
    };
    let a = perturb(&p, &spec).unwrap();
    assert_eq!(a, perturb(&p, &spec).unwrap());
    assert_ne!(a, perturb(&p, &PerturbationSpec { seed: 43, ..spec }).unwrap());
    assert_eq!(a.obs_noise_std, 0.15);
    assert!(a.mass > 0.0 && a.length > 0.0 && a.gravity > 0.0);
}

#[test]
fn relative_perturbation_has_requested_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_relative_perturbation(&mut rng, 0.1)).collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    assert!((0.095..=0.105).contains(&sd), "{sd}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert!((0..10_000).all(|_| sample_relative_perturbation(&mut rng, 2.0).abs() <= 0.9));
}

#[test]
fn observation_noise_is_applied_per_channel() {
    let p = PendulumParams {
        obs_noise_std: 0.2,
        ..PendulumParams::default()
    };
    let mut env = Pendulum::new(
        p,
        InitialState {
            angle: 1.0,
            angle_std: 0.0,
            velocity_std: 0.0,
        },
        3,
    )
    .unwrap();
    env.reset();
    let clean = encode(env.state());
    let n = 20_000;
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let o = env.observe();
        for k in 0..3 {
            sq[k] += (o[k] - clean[k]).powi(2);
        }
    }
    for s in sq {
        let sd = (s / n as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.006, "{sd}");
    }
}

#[test]
fn synthetic_system_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-1.0..=1.0);
        assert_eq!(synthetic_1d_step(0.0, x), 0.0);
        let phi: f64 = rng.random_range(-3.0..3.0);
        let d: f64 = rng.random_range(-0.5..0.5);
        assert!((synthetic_1d_step(phi + d, x) - synthetic_1d_step(phi, x)).abs() <= d.abs() + 1e-15);
    }
    assert_eq!(synthetic_1d_step(FRAC_PI_2, 1.0), 1.0);
}

struct Linear;

impl ParametricSystem for Linear {
    fn param_dim(&self) -> usize {
        1
    }
    fn input_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0)]
    }
    fn eval(&self, input: &[f64], phi: &[f64]) -> Vec<f64> {
        vec![phi[0] * input[0]]
    }
}

#[test]
fn lipschitz_of_linear_system_is_its_slope() {
    let est = estimate_lipschitz(&Linear, &[1.0], 0.5, 10_000, 3).unwrap();
    // Central differences are exact for a linear map up to rounding.
    assert!((0.99..=1.0 + 1e-9).contains(&est.k), "{}", est.k);
    let w = est.witness.unwrap();
    assert!(w.input[0] >= 0.99);
}

#[test]
fn lipschitz_of_synthetic_system_stays_below_one() {
    for seed in 0..5 {
        let est = estimate_lipschitz(&Synthetic1d, &[1.0], 0.3, 10_000, seed).unwrap();
        assert!(est.k <= 1.0 + 1e-9 && est.k > 0.5);
    }
}

#[test]
fn lipschitz_estimate_grows_with_samples() {
    let small = estimate_lipschitz(&Synthetic1d, &[2.0], 0.4, 100, 9).unwrap();
    let large = estimate_lipschitz(&Synthetic1d, &[2.0], 0.4, 5_000, 9).unwrap();
    assert!(large.k >= small.k);
}

#[test]
fn pendulum_lipschitz_is_reproducible() {
    let fam = PendulumFamily {
        base: PendulumParams::default(),
    };
    let phi0 = [1.0, 1.0, 9.81];
    let ks: Vec<f64> = (0..3)
        .map(|s| estimate_lipschitz(&fam, &phi0, 0.2, 100_000, s).unwrap().k)
        .collect();
    for k in &ks[1..] {
        // Three significant digits.
        assert!(((k - ks[0]) / ks[0]).abs() < 5e-4, "{ks:?}");
    }
}

#[test]
fn degenerate_offsets_are_reported() {
    let r = estimate_lipschitz(&Linear, &[1.0], 1e-14, 200, 0);
    assert!(matches!(r, Err(Error::DegenerateSamples(_))));
    assert!(estimate_lipschitz(&Linear, &[1.0, 2.0], 0.1, 200, 0).is_err());
}

#[test]
fn first_episode_replays_through_the_simulator() {
    let config = TrainConfig {
        episodes: 1,
        horizon: 15,
        epochs_per_episode: 1,
        n_basis: 3,
        ..TrainConfig::default()
    };
    let mut run = RunState::new(config.clone()).unwrap();
    run.run_episode().unwrap();
    assert_eq!(run.dataset.len(), 15);
    for (x, y) in run.dataset.inputs.iter().zip(&run.dataset.targets) {
        let mut s = decode(&x[..3]);
        for _ in 0..config.env.substeps {
            s = pendulum_step(&config.env, s, x[3]);
        }
        let next = encode(s);
        for k in 0..3 {
            assert!((x[k] + y[k] - next[k]).abs() < 1e-8, "replay residual");
        }
    }
}

proptest! {
    #[test]
    fn decoding_recovers_the_angle(theta in -PI..PI, omega in -8.0f64..8.0) {
        let back = decode(&encode([theta, omega]));
        prop_assert!((back[0] - theta).abs() < 1e-12 || (theta + PI).abs() < 1e-12);
        prop_assert_eq!(back[1], omega);
    }

    #[test]
    fn perturbed_parameters_stay_positive(sigma in 0.0f64..3.0, seed in any::<u64>()) {
        let q = perturb(&PendulumParams::default(), &PerturbationSpec { sigma_perturb: sigma, seed }).unwrap();
        prop_assert!(q.mass > 0.0 && q.length > 0.0 && q.gravity > 0.0);
        prop_assert!(q.validate().is_ok());
    }
}
