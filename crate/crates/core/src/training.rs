//! Episodic loop: interact with the pendulum, refit the dynamics model, then
//! run primal-dual policy optimization on the Lagrangian.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::{policy_eval, PolicyParams, DEFAULT_BASIS_FUNCTIONS};
use crate::env::{InitialState, Pendulum, PendulumParams};
use crate::error::{Error, Result};
use crate::gp::{check_version, FitConfig, GpCheckpoint, GpModel, TransitionDataset};
use crate::objective::{policy_gradient, CostModel, HazardRegion, LagrangianState, RolloutInputs, TrajectorySummary};
use crate::optim::Adam;
use crate::propagation::GaussianState;
use crate::stats::derive_seed;

pub const RUN_FORMAT_VERSION: u32 = 1;

const STREAM_POLICY_INIT: u64 = 1;
const STREAM_EPISODE: u64 = 2;

fn default_cost_width() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub epochs_per_episode: usize,
    pub learning_rate: f64,
    pub dual_learning_rate: f64,
    pub xi: f64,
    pub lambda0: f64,
    /// Likelihood-noise floor; `None` trains without a bound.
    pub sigma_low: Option<f64>,
    /// When false the multiplier is pinned to zero (no safety term).
    #[serde(default = "default_true")]
    pub constrained: bool,
    pub seed: u64,
    pub n_basis: usize,
    #[serde(default = "default_cost_width")]
    pub cost_width: f64,
    pub gp: FitConfig,
    pub env: PendulumParams,
    pub initial: InitialState,
    pub hazard: HazardRegion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            horizon: 40,
            epochs_per_episode: 100,
            learning_rate: 0.01,
            dual_learning_rate: 0.01,
            xi: 1.0,
            lambda0: 20.0,
            sigma_low: Some(0.1),
            constrained: true,
            seed: 0,
            n_basis: DEFAULT_BASIS_FUNCTIONS,
            cost_width: default_cost_width(),
            gp: FitConfig::default(),
            env: PendulumParams::default(),
            initial: InitialState::default(),
            hazard: HazardRegion::pendulum(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.episodes == 0 || self.horizon == 0 || self.n_basis == 0 {
            return bad("episodes, horizon and n_basis must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.dual_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda0 >= 0.0) || !self.xi.is_finite() {
            return bad("lambda0 must be >= 0 and xi finite");
        }
        if let Some(s) = self.sigma_low {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("sigma_low must be finite and >= 0");
            }
        }
        if !(self.cost_width > 0.0) {
            return bad("cost_width must be positive");
        }
        self.env.validate()
    }

    pub fn noise_bound(&self) -> f64 {
        self.sigma_low.unwrap_or(0.0)
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel::pendulum(self.cost_width)
    }

    /// Planning distribution of the first observation.
    pub fn initial_distribution(&self) -> Result<GaussianState> {
        self.initial.observation_moments(self.env.obs_noise_std)
    }
}

/// Generic projected primal-dual update shared by the policy loop and small
/// analytic problems: an Adam step on `theta` along `grad_l`, then
/// `lambda <- max(0, lambda + lr_lambda * (q - xi))`.
pub fn primal_dual_update(
    theta: &mut [f64],
    lambda: &mut f64,
    adam: &mut Adam,
    grad_l: &[f64],
    q: f64,
    xi: f64,
    lr_lambda: f64,
) -> Result<()> {
    if *lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if grad_l.iter().any(|g| !g.is_finite()) || !q.is_finite() {
        return Err(Error::NonFinite("primal-dual inputs".into()));
    }
    adam.step(theta, grad_l);
    let next = (*lambda + lr_lambda * (q - xi)).max(0.0);
    if theta.iter().any(|v| !v.is_finite()) || !next.is_finite() {
        return Err(Error::NonFinite("primal-dual update".into()));
    }
    *lambda = next;
    Ok(())
}

/// One primal-dual iteration on the policy: `grad` is `grad_theta L` and `q`
/// the risk of the same rollout.
pub fn primal_dual_step(
    state: &LagrangianState,
    adam: &mut Adam,
    grad: &[f64],
    q: f64,
    lr_lambda: f64,
) -> Result<LagrangianState> {
    let mut theta = state.policy.to_flat();
    let mut lambda = state.lambda;
    primal_dual_update(&mut theta, &mut lambda, adam, grad, q, state.xi, lr_lambda)?;
    Ok(LagrangianState {
        policy: state.policy.with_flat(&theta)?,
        lambda,
        xi: state.xi,
        steps: state.steps + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Negated sum of true costs over the interaction episode.
    pub real_return: f64,
    pub real_violations: usize,
    /// Predicted value and risk of the policy after optimization.
    pub value: f64,
    pub risk: f64,
    /// Multiplier after each policy epoch.
    pub lambda_trace: Vec<f64>,
    pub dataset_size: usize,
    pub noise_std: Vec<f64>,
}

/// Transitions and outcome of one real-environment episode.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub costs: Vec<f64>,
    pub violations: usize,
}

impl Interaction {
    pub fn episode_return(&self) -> f64 {
        -self.costs.iter().sum::<f64>()
    }
}

/// Action selection for [`interact`].
pub enum Actor<'a> {
    Policy(&'a PolicyParams),
    /// Uniform torques from the environment's RNG.
    Random,
}

/// Runs one episode of `horizon` control steps from a fresh reset. Cost and
/// hazard membership are recorded for each visited state `x_0..x_{T-1}`.
pub fn interact(
    env: &mut Pendulum,
    actor: &Actor<'_>,
    horizon: usize,
    cost: &CostModel,
    region: &HazardRegion,
) -> Result<Interaction> {
    let mut obs = env.reset();
    let mut out = Interaction {
        observations: vec![obs.clone()],
        actions: Vec::with_capacity(horizon),
        costs: Vec::with_capacity(horizon),
        violations: 0,
    };
    for _ in 0..horizon {
        let (c, v) = env.assess(cost, region);
        out.costs.push(c);
        out.violations += usize::from(v);
        let u = match actor {
            Actor::Policy(p) => policy_eval(p, &DVector::from_column_slice(&obs))?[0],
            Actor::Random => env.random_action(),
        };
        let u = u.clamp(-env.params.u_max, env.params.u_max);
        obs = env.step(u);
        out.actions.push(u);
        out.observations.push(obs.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub config: TrainConfig,
    pub dataset: TransitionDataset,
    pub model: Option<GpModel>,
    pub lagrangian: LagrangianState,
    pub logs: Vec<EpisodeLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub dataset: TransitionDataset,
    pub model: Option<GpCheckpoint>,
    pub lagrangian: LagrangianState,
    pub logs: Vec<EpisodeLog>,
}

impl RunState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let init = config.initial_distribution()?;
        let policy = PolicyParams::random(
            &init,
            config.n_basis,
            &[config.env.u_max],
            derive_seed(config.seed, STREAM_POLICY_INIT, 0),
        )?;
        let lambda = if config.constrained { config.lambda0 } else { 0.0 };
        Ok(Self {
            dataset: TransitionDataset::new(3, 1),
            model: None,
            lagrangian: LagrangianState {
                policy,
                lambda,
                xi: config.xi,
                steps: 0,
            },
            logs: Vec::new(),
            config,
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.logs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.episodes_done() >= self.config.episodes
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.lagrangian.policy
    }

    /// Inputs for a planning rollout under the current model.
    pub fn with_rollout_inputs<T>(&self, f: impl FnOnce(&RolloutInputs<'_>) -> Result<T>) -> Result<T> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no dynamics model has been fitted yet".into()))?;
        let init = self.config.initial_distribution()?;
        let cost = self.config.cost_model();
        let inputs = RolloutInputs {
            model,
            init: &init,
            horizon: self.config.horizon,
            cost: &cost,
            region: &self.config.hazard,
        };
        f(&inputs)
    }

    /// Interact, refit, optimize; appends and returns the episode log.
    pub fn run_episode(&mut self) -> Result<&EpisodeLog> {
        let ep = self.episodes_done();
        self.run_episode_inner(ep).map_err(|e| e.in_episode(ep))?;
        Ok(self.logs.last().expect("log appended"))
    }

    fn run_episode_inner(&mut self, ep: usize) -> Result<()> {
        let cfg = self.config.clone();
        let cost = cfg.cost_model();
        let mut env = Pendulum::new(
            cfg.env.clone(),
            cfg.initial,
            derive_seed(cfg.seed, STREAM_EPISODE, ep as u64),
        )?;
        let actor = if ep == 0 {
            Actor::Random
        } else {
            Actor::Policy(&self.lagrangian.policy)
        };
        let run = interact(&mut env, &actor, cfg.horizon, &cost, &cfg.hazard)?;
        for t in 0..cfg.horizon {
            self.dataset
                .push(&run.observations[t], &[run.actions[t]], &run.observations[t + 1])?;
        }

        let model = GpModel::fit(&self.dataset, cfg.noise_bound(), &cfg.gp)?;
        let init = cfg.initial_distribution()?;
        let inputs = RolloutInputs {
            model: &model,
            init: &init,
            horizon: cfg.horizon,
            cost: &cost,
            region: &cfg.hazard,
        };
        let mut adam = Adam::new(cfg.learning_rate, self.lagrangian.policy.n_params());
        let mut trace = Vec::with_capacity(cfg.epochs_per_episode);
        for _ in 0..cfg.epochs_per_episode {
            let (summary, grad) = policy_gradient(&inputs, &self.lagrangian.policy, self.lagrangian.lambda)?;
            let mut next = primal_dual_step(&self.lagrangian, &mut adam, &grad, summary.risk, cfg.dual_learning_rate)?;
            if !cfg.constrained {
                next.lambda = 0.0;
            }
            self.lagrangian = next;
            trace.push(self.lagrangian.lambda);
        }
        let final_summary: TrajectorySummary = crate::objective::rollout(&inputs, &self.lagrangian.policy)?;
        self.logs.push(EpisodeLog {
            episode: ep,
            real_return: run.episode_return(),
            real_violations: run.violations,
            value: final_summary.value,
            risk: final_summary.risk,
            lambda_trace: trace,
            dataset_size: self.dataset.len(),
            noise_std: model.noise_std(),
        });
        self.model = Some(model);
        Ok(())
    }

    /// Runs the remaining episodes, calling `on_episode` after each.
    pub fn train(&mut self, mut on_episode: impl FnMut(&RunState) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_episode()?;
            on_episode(self)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            format_version: RUN_FORMAT_VERSION,
            config: self.config.clone(),
            dataset: self.dataset.clone(),
            model: self.model.as_ref().map(|m| m.to_checkpoint()),
            lagrangian: self.lagrangian.clone(),
            logs: self.logs.clone(),
        }
    }

    pub fn from_checkpoint(ck: RunCheckpoint) -> Result<Self> {
        if ck.format_version != RUN_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                supported: RUN_FORMAT_VERSION,
            });
        }
        ck.config.validate()?;
        ck.lagrangian.policy.validate()?;
        let model = ck.model.as_ref().map(GpModel::from_checkpoint).transpose()?;
        Ok(Self {
            config: ck.config,
            dataset: ck.dataset,
            model,
            lagrangian: ck.lagrangian,
            logs: ck.logs,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        check_version(&value, RUN_FORMAT_VERSION)?;
        let ck: RunCheckpoint = serde_json::from_value(value)?;
        Self::from_checkpoint(ck)
    }
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}")?;
    Ok(())
}
