//! Expected saturating cost, hazard-region risk, moment-matching rollouts and
//! the Lagrangian `L = V + lambda (Q - xi)` with its policy gradient.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{policy_backward, policy_forward, PolicyCache, PolicyParams};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::linalg::{inverse_and_det, symmetrize};
use crate::propagation::{transition_backward, transition_forward, GaussianState, TransitionCache};

/// Saturating cost `1 - exp(-1/2 (x - target)^T W (x - target))` with diagonal `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub target: Vec<f64>,
    /// Diagonal of `W`; zero entries exclude a dimension.
    pub weights: Vec<f64>,
}

impl CostModel {
    /// `W = diag(1/width^2)` on `dims`, zero elsewhere.
    pub fn saturating(target: Vec<f64>, width: f64, dims: &[usize]) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost width must be positive, got {width}"
            )));
        }
        let mut weights = vec![0.0; target.len()];
        for &k in dims {
            if k >= target.len() {
                return Err(Error::InvalidArgument(format!("cost dimension {k} out of range")));
            }
            weights[k] = 1.0 / (width * width);
        }
        Ok(Self { target, weights })
    }

    /// Upright pendulum target in `(cos, sin, angular velocity)` coordinates.
    pub fn pendulum(width: f64) -> Self {
        Self::saturating(vec![1.0, 0.0, 0.0], width, &[0, 1]).expect("valid pendulum cost")
    }

    pub fn point_cost(&self, x: &[f64]) -> f64 {
        let q: f64 = x
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((x, t), w)| w * (x - t) * (x - t))
            .sum();
        1.0 - (-0.5 * q).exp()
    }
}

/// Value and `(d/dm, d/dS)` of the expected cost.
pub fn expected_cost_with_grad(cost: &CostModel, state: &GaussianState) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let d = state.dim();
    if cost.target.len() != d || cost.weights.len() != d {
        return Err(Error::DimensionMismatch {
            what: "cost target",
            expected: d,
            got: cost.target.len(),
        });
    }
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&cost.weights));
    let s = state.cov();
    let mut isw = s * &w;
    for k in 0..d {
        isw[(k, k)] += 1.0;
    }
    let (inv, det) = inverse_and_det(&isw).ok_or(Error::SingularInput("I + S W"))?;
    if det <= 0.0 {
        return Err(Error::SingularInput("I + S W has non-positive determinant"));
    }
    let k = symmetrize(&(&w * inv));
    let e = state.mean() - DVector::from_column_slice(&cost.target);
    let ke = &k * &e;
    let a = det.powf(-0.5) * (-0.5 * e.dot(&ke)).exp();
    let c = (1.0 - a).clamp(0.0, 1.0);
    // c = 1 - a
    let dm = &ke * a;
    let ds = (&k - &ke * ke.transpose()) * (0.5 * a);
    Ok((c, dm, ds))
}

/// Closed-form `E[C(x)]` for `x ~ N(m, S)`, in `[0, 1]`.
pub fn expected_cost(cost: &CostModel, state: &GaussianState) -> Result<f64> {
    expected_cost_with_grad(cost, state).map(|(c, _, _)| c)
}

/// Where the constrained angle lives in the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AngleSource {
    /// The angle itself is a state dimension.
    Direct { index: usize },
    /// The state carries `(cos, sin)` of the angle. The angle distribution is
    /// approximated to first order through `atan2`, and the interval is
    /// counted on the circle.
    Encoded { cos_index: usize, sin_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardRegion {
    pub angle: AngleSource,
    pub lo: f64,
    pub hi: f64,
}

impl HazardRegion {
    pub fn new(angle: AngleSource, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "hazard interval needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { angle, lo, hi })
    }

    /// Angle in `[pi/4, 3pi/4]` read from the `(cos, sin)` channels of a pendulum observation.
    pub fn pendulum() -> Self {
        Self {
            angle: AngleSource::Encoded {
                cos_index: 0,
                sin_index: 1,
            },
            lo: PI / 4.0,
            hi: 3.0 * PI / 4.0,
        }
    }

    fn copies(&self) -> &'static [f64] {
        match self.angle {
            AngleSource::Direct { .. } => &[0.0],
            AngleSource::Encoded { .. } => &[-2.0 * PI, 0.0, 2.0 * PI],
        }
    }

    /// Whether a wrapped angle lies in the region.
    pub fn contains_angle(&self, theta: f64) -> bool {
        match self.angle {
            AngleSource::Direct { .. } => theta >= self.lo && theta <= self.hi,
            AngleSource::Encoded { .. } => {
                let w = wrap_angle(theta);
                self.copies().iter().any(|k| w >= self.lo + k && w <= self.hi + k)
            }
        }
    }

    fn max_index(&self) -> usize {
        match self.angle {
            AngleSource::Direct { index } => index,
            AngleSource::Encoded { cos_index, sin_index } => cos_index.max(sin_index),
        }
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.sin().atan2(theta.cos());
    if w == -PI {
        PI
    } else {
        w
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Below this standard deviation the angle is treated as a point mass.
const POINT_MASS_STD: f64 = 1e-150;

/// Angle mean and variance with sparse Jacobians: `d mu / d m`, `d var / d m`, `d var / d S`.
type AngleMoments = (f64, f64, Vec<(usize, f64)>, Vec<(usize, f64)>, Vec<(usize, usize, f64)>);

/// Value and `(d/dm, d/dS)` of the hazard probability.
pub fn risk_with_grad(region: &HazardRegion, state: &GaussianState) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let d = state.dim();
    if region.max_index() >= d {
        return Err(Error::DimensionMismatch {
            what: "hazard dimension",
            expected: d,
            got: region.max_index() + 1,
        });
    }
    let m = state.mean();
    let s = state.cov();
    let mut dm = DVector::zeros(d);
    let mut ds = DMatrix::zeros(d, d);

    // Gaussian over the angle together with d(mu)/d(m), d(var)/d(m), d(var)/d(S).
    let (mu, var, jmu, jvar_m, jvar_s): AngleMoments = match region.angle {
        AngleSource::Direct { index } => (
            m[index],
            s[(index, index)],
            vec![(index, 1.0)],
            vec![],
            vec![(index, index, 1.0)],
        ),
        AngleSource::Encoded {
            cos_index: ci,
            sin_index: si,
        } => {
            let (mc, ms) = (m[ci], m[si]);
            let r2 = (mc * mc + ms * ms).max(1e-12);
            let r4 = r2 * r2;
            let (scc, scs, sss) = (s[(ci, ci)], s[(ci, si)], s[(si, si)]);
            let num = ms * ms * scc - 2.0 * ms * mc * scs + mc * mc * sss;
            let var = (num / r4).max(0.0);
            let dnum_c = -2.0 * ms * scs + 2.0 * mc * sss;
            let dnum_s = 2.0 * ms * scc - 2.0 * mc * scs;
            (
                ms.atan2(mc),
                var,
                vec![(ci, -ms / r2), (si, mc / r2)],
                vec![
                    (ci, dnum_c / r4 - 4.0 * num * mc / (r4 * r2)),
                    (si, dnum_s / r4 - 4.0 * num * ms / (r4 * r2)),
                ],
                vec![
                    (ci, ci, ms * ms / r4),
                    (ci, si, -ms * mc / r4),
                    (si, ci, -ms * mc / r4),
                    (si, si, mc * mc / r4),
                ],
            )
        }
    };

    let sd = var.sqrt();
    if !(sd > POINT_MASS_STD) {
        let inside = match region.angle {
            AngleSource::Direct { .. } => mu >= region.lo && mu <= region.hi,
            AngleSource::Encoded { .. } => region.contains_angle(mu),
        };
        return Ok((if inside { 1.0 } else { 0.0 }, dm, ds));
    }
    let mut g = 0.0;
    let mut g_mu = 0.0;
    let mut g_sd = 0.0;
    for k in region.copies() {
        let zh = (region.hi + k - mu) / sd;
        let zl = (region.lo + k - mu) / sd;
        g += std_normal_cdf(zh) - std_normal_cdf(zl);
        let (ph, pl) = (std_normal_pdf(zh), std_normal_pdf(zl));
        g_mu += (-ph + pl) / sd;
        g_sd += (-ph * zh + pl * zl) / sd;
    }
    let g_var = g_sd / (2.0 * sd);
    for (i, v) in jmu {
        dm[i] += g_mu * v;
    }
    for (i, v) in jvar_m {
        dm[i] += g_var * v;
    }
    for (i, j, v) in jvar_s {
        ds[(i, j)] += g_var * v;
    }
    Ok((g.clamp(0.0, 1.0), dm, ds))
}

/// Probability mass of the angle marginal inside the hazard interval.
pub fn risk(region: &HazardRegion, state: &GaussianState) -> Result<f64> {
    risk_with_grad(region, state).map(|(g, _, _)| g)
}

/// Predicted trajectory with per-step cost and risk, and their totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub states: Vec<GaussianState>,
    pub step_costs: Vec<f64>,
    pub step_risks: Vec<f64>,
    /// `V = sum c_t`.
    pub value: f64,
    /// `Q = sum G(x_t)`.
    pub risk: f64,
}

/// Everything a rollout needs besides the policy.
#[derive(Debug, Clone, Copy)]
pub struct RolloutInputs<'a> {
    pub model: &'a GpModel,
    pub init: &'a GaussianState,
    pub horizon: usize,
    pub cost: &'a CostModel,
    pub region: &'a HazardRegion,
}

struct StepCache {
    state: GaussianState,
    policy: PolicyCache,
    transition: TransitionCache,
}

fn rollout_inner(
    inputs: &RolloutInputs<'_>,
    policy: &PolicyParams,
    keep: bool,
) -> Result<(TrajectorySummary, Vec<StepCache>)> {
    if inputs.horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    policy.validate()?;
    if policy.state_dim() != inputs.model.state_dim() || policy.action_dim() != inputs.model.action_dim() {
        return Err(Error::DimensionMismatch {
            what: "policy vs model dimensions",
            expected: inputs.model.input_dim(),
            got: policy.state_dim() + policy.action_dim(),
        });
    }
    let t_max = inputs.horizon;
    let mut states = Vec::with_capacity(t_max);
    let mut step_costs = Vec::with_capacity(t_max);
    let mut step_risks = Vec::with_capacity(t_max);
    let mut caches = Vec::new();
    let mut x = inputs.init.clone();
    for t in 0..t_max {
        let step = || -> Result<(f64, f64)> { Ok((expected_cost(inputs.cost, &x)?, risk(inputs.region, &x)?)) };
        let (c, g) = step().map_err(|e| e.at_step(t))?;
        step_costs.push(c);
        step_risks.push(g);
        states.push(x.clone());
        if t + 1 == t_max {
            break;
        }
        let (joint, pc) = policy_forward(policy, &x).map_err(|e| e.at_step(t))?;
        let (next, tc) = transition_forward(inputs.model, &joint).map_err(|e| e.at_step(t))?;
        if keep {
            caches.push(StepCache {
                state: x,
                policy: pc,
                transition: tc,
            });
        }
        x = next;
    }
    let value = step_costs.iter().sum();
    let risk = step_risks.iter().sum();
    Ok((
        TrajectorySummary {
            states,
            step_costs,
            step_risks,
            value,
            risk,
        },
        caches,
    ))
}

/// Predicts `T` states `x_0 = init, x_1, ..., x_{T-1}` by alternating
/// policy moments and GP moment matching, accumulating cost and risk at each.
pub fn rollout(inputs: &RolloutInputs<'_>, policy: &PolicyParams) -> Result<TrajectorySummary> {
    rollout_inner(inputs, policy, false).map(|(s, _)| s)
}

/// Policy parameters with the dual variable and constraint threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub policy: PolicyParams,
    pub lambda: f64,
    pub xi: f64,
    pub steps: u64,
}

pub fn lagrangian_value(summary: &TrajectorySummary, lambda: f64, xi: f64) -> f64 {
    summary.value + lambda * (summary.risk - xi)
}

/// `V + lambda (Q - xi)` from a single rollout.
pub fn lagrangian(inputs: &RolloutInputs<'_>, policy: &PolicyParams, lambda: f64, xi: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(lagrangian_value(&rollout(inputs, policy)?, lambda, xi))
}

/// Gradient of `cost_weight * V + risk_weight * Q` with respect to
/// [`PolicyParams::to_flat`], by reverse accumulation through the rollout.
pub fn weighted_gradient(
    inputs: &RolloutInputs<'_>,
    policy: &PolicyParams,
    cost_weight: f64,
    risk_weight: f64,
) -> Result<(TrajectorySummary, Vec<f64>)> {
    let (summary, caches) = rollout_inner(inputs, policy, true)?;
    let d = policy.state_dim();
    let f = policy.action_dim();
    let mut theta_bar = vec![0.0; policy.n_params()];

    let local = |x: &GaussianState, t: usize| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (_, cm, cs) = expected_cost_with_grad(inputs.cost, x).map_err(|e| e.at_step(t))?;
        let (_, gm, gs) = risk_with_grad(inputs.region, x).map_err(|e| e.at_step(t))?;
        Ok((cm * cost_weight + gm * risk_weight, cs * cost_weight + gs * risk_weight))
    };

    let last = summary.states.len() - 1;
    let (mut m_bar, mut s_bar) = local(&summary.states[last], last)?;
    for t in (0..caches.len()).rev() {
        let c = &caches[t];
        let (jm, js) = transition_backward(inputs.model, &c.transition, &m_bar, &s_bar);
        let mut prev_m = jm.rows(0, d).into_owned();
        let mut prev_s = js.view((0, 0), (d, d)).into_owned();
        let um = jm.rows(d, f).into_owned();
        let cross = js.view((0, d), (d, f)) + js.view((d, 0), (f, d)).transpose();
        let us = js.view((d, d), (f, f)).into_owned();
        let pa = policy_backward(policy, &c.state, &c.policy, &um, &us, &cross);
        prev_m += pa.state_mean;
        prev_s += pa.state_cov;
        for (acc, g) in theta_bar.iter_mut().zip(&pa.theta) {
            *acc += g;
        }
        let (lm, ls) = local(&c.state, t)?;
        m_bar = prev_m + lm;
        s_bar = symmetrize(&(prev_s + ls));
    }
    if theta_bar.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    Ok((summary, theta_bar))
}

/// `grad_theta L` for `L = V + lambda (Q - xi)`, together with the rollout it came from.
pub fn policy_gradient(
    inputs: &RolloutInputs<'_>,
    policy: &PolicyParams,
    lambda: f64,
) -> Result<(TrajectorySummary, Vec<f64>)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    weighted_gradient(inputs, policy, 1.0, lambda)
}
