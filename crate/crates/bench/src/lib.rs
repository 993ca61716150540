//! Fixtures shared by the benchmarks.

use pilco_core::env::{InitialState, Pendulum, PendulumParams};
use pilco_core::gp::{FitConfig, GpModel, TransitionDataset};
use pilco_core::objective::{CostModel, HazardRegion};
use pilco_core::training::{interact, Actor};
use pilco_core::{GaussianState, PolicyParams};

/// Transitions from `episodes` random-torque pendulum episodes of length `horizon`.
pub fn random_transitions(episodes: usize, horizon: usize, seed: u64) -> TransitionDataset {
    let cost = CostModel::pendulum(0.25);
    let region = HazardRegion::pendulum();
    let mut data = TransitionDataset::new(3, 1);
    for ep in 0..episodes as u64 {
        let mut env = Pendulum::new(
            PendulumParams::default(),
            InitialState::default(),
            seed.wrapping_mul(1000) + ep,
        )
        .expect("default pendulum is valid");
        let run = interact(&mut env, &Actor::Random, horizon, &cost, &region).expect("random episode");
        for t in 0..horizon {
            data.push(&run.observations[t], &[run.actions[t]], &run.observations[t + 1])
                .expect("pendulum transition shape");
        }
    }
    data
}

/// A fitted dynamics model, the planning start state and a default-sized policy.
pub struct Fixture {
    pub model: GpModel,
    pub init: GaussianState,
    pub policy: PolicyParams,
    pub cost: CostModel,
    pub region: HazardRegion,
}

pub fn pendulum_fixture(episodes: usize, n_basis: usize) -> Fixture {
    let data = random_transitions(episodes, 40, 1);
    let model = GpModel::fit(&data, 0.1, &FitConfig::default()).expect("fit");
    let init = InitialState::default()
        .observation_moments(0.0)
        .expect("initial moments");
    let policy = PolicyParams::random(&init, n_basis, &[2.0], 7).expect("policy");
    Fixture {
        model,
        init,
        policy,
        cost: CostModel::pendulum(0.25),
        region: HazardRegion::pendulum(),
    }
}
