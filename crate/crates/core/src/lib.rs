//! Model-based policy search with Gaussian-process dynamics, a lower bound on
//! the learned likelihood noise, chance-constrained primal-dual optimization,
//! and a harness for evaluating policies under perturbed physics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod objective;
pub mod optim;
pub mod propagation;
pub mod stats;
pub mod training;

pub use controller::{policy_eval, policy_moments, PolicyParams};
pub use env::{perturb, InitialState, Pendulum, PendulumParams, PerturbationSpec};
pub use error::{Error, Result};
pub use gp::{effective_noise, FitConfig, GpModel, KernelHyperparams, TransitionDataset};
pub use harness::{EvalReport, EvalSpec, GridConfig, LemmaConfig, LemmaReport};
pub use objective::{CostModel, HazardRegion, LagrangianState, TrajectorySummary};
pub use propagation::{GaussianState, JointMoments};
pub use training::{RunState, TrainConfig};
