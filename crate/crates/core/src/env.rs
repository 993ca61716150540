//! Ground-truth systems: the torque-limited pendulum, a one-dimensional family
//! with known parameter sensitivity, parameter perturbations and empirical
//! Lipschitz estimation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{CostModel, HazardRegion};
use crate::propagation::GaussianState;

pub const MAX_SPEED: f64 = 8.0;

/// Physical and simulation parameters. Angles are measured from upright, so
/// the pendulum hangs at `theta = pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    /// Gravity magnitude.
    pub gravity: f64,
    pub dt: f64,
    pub u_max: f64,
    pub obs_noise_std: f64,
    /// Integration steps per control step (the action is held constant).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    4
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            dt: 0.05,
            u_max: 2.0,
            obs_noise_std: 0.0,
            substeps: default_substeps(),
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.length > 0.0
            && self.dt > 0.0
            && self.gravity != 0.0
            && self.gravity.is_finite()
            && self.u_max > 0.0
            && self.obs_noise_std >= 0.0
            && self.substeps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid pendulum parameters {self:?}")))
        }
    }

    /// Angular acceleration at angle `theta` under torque `u` (already clipped).
    pub fn angular_acceleration(&self, theta: f64, u: f64) -> f64 {
        // sin(theta) = -sin(theta - pi) keeps the hanging rest state exactly fixed.
        let sin_theta = -(theta - PI).sin();
        3.0 * self.gravity / (2.0 * self.length) * sin_theta + 3.0 * u / (self.mass * self.length * self.length)
    }
}

/// One semi-implicit Euler step on the true state `(theta, theta_dot)`. The
/// torque is clipped to `u_max` and the velocity to `[-8, 8]`.
pub fn pendulum_step(params: &PendulumParams, state: [f64; 2], u: f64) -> [f64; 2] {
    let u = u.clamp(-params.u_max, params.u_max);
    let [theta, theta_dot] = state;
    let acc = params.angular_acceleration(theta, u);
    let theta_dot = (theta_dot + params.dt * acc).clamp(-MAX_SPEED, MAX_SPEED);
    [theta + params.dt * theta_dot, theta_dot]
}

/// Noise-free observation `(cos theta, sin theta, theta_dot)`.
pub fn encode(state: [f64; 2]) -> [f64; 3] {
    [state[0].cos(), state[0].sin(), state[1]]
}

/// Recovers `(theta, theta_dot)` from an observation, with `theta` in `(-pi, pi]`.
pub fn decode(obs: &[f64]) -> [f64; 2] {
    [obs[1].atan2(obs[0]), obs[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub sigma_perturb: f64,
    pub seed: u64,
}

/// Bound on the relative parameter change; keeps perturbed parameters positive.
pub const PERTURBATION_TRUNCATION: f64 = 0.9;

/// Draws `eps ~ N(0, sigma^2)` conditioned on `|eps| <= 0.9` by rejection.
pub fn sample_relative_perturbation(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let e: f64 = n.sample(rng);
        if e.abs() <= PERTURBATION_TRUNCATION {
            return e;
        }
    }
}

/// Multiplies mass, length and gravity by independent `(1 + eps)` factors and
/// sets the observation noise to `sigma_perturb`.
pub fn perturb(params: &PendulumParams, spec: &PerturbationSpec) -> Result<PendulumParams> {
    if !(spec.sigma_perturb >= 0.0) || !spec.sigma_perturb.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma_perturb must be finite and >= 0, got {}",
            spec.sigma_perturb
        )));
    }
    let mut out = params.clone();
    out.obs_noise_std = spec.sigma_perturb;
    if spec.sigma_perturb == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    out.mass *= 1.0 + sample_relative_perturbation(&mut rng, spec.sigma_perturb);
    out.length *= 1.0 + sample_relative_perturbation(&mut rng, spec.sigma_perturb);
    out.gravity *= 1.0 + sample_relative_perturbation(&mut rng, spec.sigma_perturb);
    Ok(out)
}

/// Distribution of the pendulum's starting state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub angle: f64,
    pub angle_std: f64,
    pub velocity_std: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            angle: PI,
            angle_std: 0.1,
            velocity_std: 0.1,
        }
    }
}

impl InitialState {
    /// Exact Gaussian moments of the first observation `(cos, sin, theta_dot)`
    /// plus observation noise.
    pub fn observation_moments(&self, obs_noise_std: f64) -> Result<GaussianState> {
        let (mu, v) = (self.angle, self.angle_std * self.angle_std);
        let k = (-0.5 * v).exp();
        let k2 = (-2.0 * v).exp();
        let (ec, es) = (k * mu.cos(), k * mu.sin());
        let vcc = 0.5 * (1.0 + k2 * (2.0 * mu).cos()) - ec * ec;
        let vss = 0.5 * (1.0 - k2 * (2.0 * mu).cos()) - es * es;
        let vcs = 0.5 * k2 * (2.0 * mu).sin() - ec * es;
        let n2 = obs_noise_std * obs_noise_std;
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[
                vcc.max(0.0) + n2,
                vcs,
                0.0,
                vcs,
                vss.max(0.0) + n2,
                0.0,
                0.0,
                0.0,
                self.velocity_std * self.velocity_std + n2,
            ],
        );
        GaussianState::new(DVector::from_vec(vec![ec, es, 0.0]), cov)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        [self.angle + self.angle_std * a, self.velocity_std * b]
    }
}

/// Stateful pendulum with a private RNG for initial states and observation noise.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub params: PendulumParams,
    pub initial: InitialState,
    state: [f64; 2],
    rng: ChaCha8Rng,
}

impl Pendulum {
    pub fn new(params: PendulumParams, initial: InitialState, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            initial,
            state: [initial.angle, 0.0],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 2]) {
        self.state = state;
    }

    pub fn state_dim(&self) -> usize {
        3
    }

    pub fn observe(&mut self) -> Vec<f64> {
        let clean = encode(self.state);
        let s = self.params.obs_noise_std;
        clean
            .iter()
            .map(|v| {
                if s > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    v + s * z
                } else {
                    *v
                }
            })
            .collect()
    }

    /// Samples a fresh initial state and returns its observation.
    pub fn reset(&mut self) -> Vec<f64> {
        self.state = self.initial.sample(&mut self.rng);
        self.observe()
    }

    /// Holds torque `u` for `substeps` integration steps and returns the new observation.
    pub fn step(&mut self, u: f64) -> Vec<f64> {
        for _ in 0..self.params.substeps {
            self.state = pendulum_step(&self.params, self.state, u);
        }
        self.observe()
    }

    /// Cost and hazard membership of the current true (noise-free) state.
    pub fn assess(&self, cost: &CostModel, region: &HazardRegion) -> (f64, bool) {
        (
            cost.point_cost(&encode(self.state)),
            region.contains_angle(self.state[0]),
        )
    }

    /// Uniform torque in `[-u_max, u_max]` from the environment's RNG.
    pub fn random_action(&mut self) -> f64 {
        self.rng.random_range(-self.params.u_max..=self.params.u_max)
    }
}

/// `f(x; phi) = sin(phi x)`; `|df/dphi| = |x cos(phi x)| <= 1` on `[-1, 1]`.
pub fn synthetic_1d_step(phi: f64, x: f64) -> f64 {
    (phi * x).sin()
}

/// A map `f(input; phi)` over a box-shaped input domain, used for sensitivity estimates.
pub trait ParametricSystem {
    fn param_dim(&self) -> usize;
    /// Per-coordinate `(lo, hi)` of the input domain.
    fn input_bounds(&self) -> Vec<(f64, f64)>;
    fn eval(&self, input: &[f64], phi: &[f64]) -> Vec<f64>;
}

/// [`synthetic_1d_step`] on `x in [-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Synthetic1d;

impl ParametricSystem for Synthetic1d {
    fn param_dim(&self) -> usize {
        1
    }
    fn input_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0)]
    }
    fn eval(&self, input: &[f64], phi: &[f64]) -> Vec<f64> {
        vec![synthetic_1d_step(phi[0], input[0])]
    }
}

/// One control step of the pendulum as a function of `phi = (mass, length, gravity)`.
/// Inputs `(theta, theta_dot, u)` are drawn uniformly over the reachable box.
#[derive(Debug, Clone)]
pub struct PendulumFamily {
    pub base: PendulumParams,
}

impl ParametricSystem for PendulumFamily {
    fn param_dim(&self) -> usize {
        3
    }
    fn input_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-PI, PI), (-MAX_SPEED, MAX_SPEED), (-self.base.u_max, self.base.u_max)]
    }
    fn eval(&self, input: &[f64], phi: &[f64]) -> Vec<f64> {
        let p = PendulumParams {
            mass: phi[0],
            length: phi[1],
            gravity: phi[2],
            ..self.base.clone()
        };
        let mut s = [input[0], input[1]];
        for _ in 0..p.substeps {
            s = pendulum_step(&p, s, input[2]);
        }
        encode(s).to_vec()
    }
}

/// Where the largest slope was seen: the input, the parameter point, and a
/// short step along the steepest parameter direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzWitness {
    pub input: Vec<f64>,
    pub phi_a: Vec<f64>,
    pub phi_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub k: f64,
    pub n_samples: usize,
    pub witness: Option<LipschitzWitness>,
}

const MIN_PARAM_GAP: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const POLISH_START: f64 = 0.05;
const POLISH_END: f64 = 1e-6;

/// Spectral norm of `d f / d phi` at `(x, phi)` by central differences, with
/// the maximizing unit direction.
fn slope(system: &dyn ParametricSystem, x: &[f64], phi: &[f64]) -> (f64, DVector<f64>) {
    let p = phi.len();
    let mut cols = Vec::with_capacity(p);
    for i in 0..p {
        let h = FD_STEP * phi[i].abs().max(1.0);
        let mut up = phi.to_vec();
        let mut down = phi.to_vec();
        up[i] += h;
        down[i] -= h;
        let width = up[i] - down[i];
        let fu = system.eval(x, &up);
        let fd = system.eval(x, &down);
        cols.push(DVector::from_iterator(
            fu.len(),
            fu.iter().zip(&fd).map(|(a, b)| (a - b) / width),
        ));
    }
    let jac = DMatrix::from_columns(&cols);
    let svd = jac.svd(false, true);
    let (k, idx) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0.0, 0), |acc, (i, &s)| if s > acc.0 { (s, i) } else { acc });
    let dir = match svd.v_t {
        Some(vt) if k > 0.0 => vt.row(idx).transpose(),
        _ => {
            let mut e = DVector::zeros(p);
            e[0] = 1.0;
            e
        }
    };
    (k, dir)
}

/// Compass search on the joint `(input, phi)` box, in coordinates scaled to
/// `[0, 1]`. Returns the best point found, never worse than the start.
fn polish(system: &dyn ParametricSystem, lo: &[f64], hi: &[f64], start: &[f64], start_k: f64) -> (Vec<f64>, f64) {
    let nx = system.input_bounds().len();
    let mut z = start.to_vec();
    let mut best = start_k;
    let mut step = POLISH_START;
    while step > POLISH_END {
        let mut improved = false;
        for i in 0..z.len() {
            for sign in [1.0, -1.0] {
                let mut cand = z.clone();
                cand[i] = (cand[i] + sign * step * (hi[i] - lo[i])).clamp(lo[i], hi[i]);
                if cand[i] == z[i] {
                    continue;
                }
                let (k, _) = slope(system, &cand[..nx], &cand[nx..]);
                if k > best {
                    best = k;
                    z = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (z, best)
}

/// Estimate of the Lipschitz constant of `phi -> f(x; phi)` over inputs in the
/// system's domain and `phi` in the box `phi0 +- radius`: the largest Jacobian
/// spectral norm seen at `n_samples` uniform points, where each new running
/// maximum is refined by a local compass search. This is a lower bound on the
/// true constant. Samples are consumed in a fixed order and refinement only
/// touches running maxima of the prefix, so a larger `n_samples` with the same
/// seed can only raise the estimate.
pub fn estimate_lipschitz(
    system: &dyn ParametricSystem,
    phi0: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if phi0.len() != system.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "latent parameter vector",
            expected: system.param_dim(),
            got: phi0.len(),
        });
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if radius < MIN_PARAM_GAP || n_samples == 0 {
        return Err(Error::DegenerateSamples(MIN_PARAM_GAP));
    }
    let bounds = system.input_bounds();
    let nx = bounds.len();
    let lo: Vec<f64> = bounds
        .iter()
        .map(|b| b.0)
        .chain(phi0.iter().map(|p| p - radius))
        .collect();
    let hi: Vec<f64> = bounds
        .iter()
        .map(|b| b.1)
        .chain(phi0.iter().map(|p| p + radius))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut record = f64::NEG_INFINITY;
    let mut best = 0.0;
    let mut best_point = None;
    for _ in 0..n_samples {
        let z: Vec<f64> = lo.iter().zip(&hi).map(|(&a, &b)| rng.random_range(a..=b)).collect();
        let (k, _) = slope(system, &z[..nx], &z[nx..]);
        if k > record {
            record = k;
            let (zp, kp) = polish(system, &lo, &hi, &z, k);
            if kp > best {
                best = kp;
                best_point = Some(zp);
            }
        }
    }
    let witness = best_point.map(|z| {
        let (_, dir) = slope(system, &z[..nx], &z[nx..]);
        let phi_a = z[nx..].to_vec();
        let phi_b = phi_a.iter().zip(dir.iter()).map(|(p, d)| p + FD_STEP * d).collect();
        LipschitzWitness {
            input: z[..nx].to_vec(),
            phi_a,
            phi_b,
        }
    });
    Ok(LipschitzEstimate {
        k: best,
        n_samples,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hanging_equilibrium_is_fixed() {
        let p = PendulumParams::default();
        let s = pendulum_step(&p, [PI, 0.0], 0.0);
        assert_eq!(s, [PI, 0.0]);
    }

    #[test]
    fn full_torque_from_rest() {
        let p = PendulumParams::default();
        let s = pendulum_step(&p, [PI, 0.0], 2.0);
        assert!((s[1] - 0.05 * 3.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn initial_moments_match_sampling() {
        let init = InitialState {
            angle: 2.5,
            angle_std: 0.4,
            velocity_std: 0.3,
        };
        let g = init.observation_moments(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut mc = 0.0;
        let mut ms = 0.0;
        for _ in 0..n {
            let s = init.sample(&mut rng);
            mc += s[0].cos();
            ms += s[0].sin();
        }
        assert!((mc / n as f64 - g.mean()[0]).abs() < 5e-3);
        assert!((ms / n as f64 - g.mean()[1]).abs() < 5e-3);
    }
}
