use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use pilco_bench::{pendulum_fixture, random_transitions};
use pilco_core::controller::policy_moments;
use pilco_core::gp::{FitConfig, GpModel};
use pilco_core::objective::{policy_gradient, rollout, RolloutInputs};
use pilco_core::propagation::{next_state_distribution, propagate_gp};
use pilco_core::GaussianState;

fn moments(c: &mut Criterion) {
    // Five episodes give 200 transitions, so the model runs at its 100-point cap.
    let fx = pendulum_fixture(5, 50);
    let joint = policy_moments(&fx.policy, &fx.init).unwrap();
    let input = GaussianState::new(joint.mean.clone(), joint.cov.clone()).unwrap();
    let mut group = c.benchmark_group("moments");
    group.bench_function("policy_moments/B50", |b| {
        b.iter(|| policy_moments(black_box(&fx.policy), &fx.init).unwrap())
    });
    group.bench_function("propagate_gp/M100", |b| {
        b.iter(|| propagate_gp(black_box(&fx.model), &input).unwrap())
    });
    group.bench_function("next_state", |b| {
        b.iter(|| next_state_distribution(black_box(&fx.model), &joint).unwrap())
    });
    group.finish();
}

fn planning(c: &mut Criterion) {
    let fx = pendulum_fixture(5, 50);
    let inputs = RolloutInputs {
        model: &fx.model,
        init: &fx.init,
        horizon: 40,
        cost: &fx.cost,
        region: &fx.region,
    };
    let mut group = c.benchmark_group("planning");
    group.sample_size(10);
    group.bench_function("rollout/T40", |b| {
        b.iter(|| rollout(black_box(&inputs), &fx.policy).unwrap())
    });
    group.bench_function("policy_gradient/T40", |b| {
        b.iter(|| policy_gradient(black_box(&inputs), &fx.policy, 5.0).unwrap())
    });
    group.finish();
}

fn model_fit(c: &mut Criterion) {
    let data = random_transitions(5, 40, 2);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("fit/N200", |b| {
        b.iter_batched(
            || data.clone(),
            |d| GpModel::fit(&d, 0.1, &FitConfig::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, moments, planning, model_fit);
criterion_main!(benches);
