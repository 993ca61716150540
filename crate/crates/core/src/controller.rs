//! RBF-network policy with sine squashing, `u = u_max * sin(r(x))`, where
//! `r(x) = sum_i w_i exp(-1/2 |x - c_i|^2_Lambda)` uses one set of lengthscales
//! shared by every basis function.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{MomentAdjoint, MomentCache, SeExpansion};
use crate::propagation::{psd_sqrt_factor, GaussianState, JointMoments};

pub const DEFAULT_BASIS_FUNCTIONS: usize = 50;
pub const DEFAULT_TORQUE_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// B x D.
    pub centers: DMatrix<f64>,
    /// B x F.
    pub weights: DMatrix<f64>,
    /// Length D, strictly positive.
    pub lengthscales: DVector<f64>,
    /// Length F, strictly positive.
    pub u_max: DVector<f64>,
}

impl PolicyParams {
    /// Centers drawn from the initial-state distribution with its standard
    /// deviation doubled, weights from `N(0, 0.1^2)`, unit lengthscales.
    pub fn random(init: &GaussianState, n_basis: usize, u_max: &[f64], seed: u64) -> Result<Self> {
        if n_basis == 0 || u_max.is_empty() || u_max.iter().any(|u| !(*u > 0.0)) {
            return Err(Error::InvalidArgument("policy needs B >= 1 and positive u_max".into()));
        }
        let d = init.dim();
        let f = u_max.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = psd_sqrt_factor(init.cov()) * 2.0;
        let mut centers = DMatrix::zeros(n_basis, d);
        for i in 0..n_basis {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let c = init.mean() + &l * z;
            centers.set_row(i, &c.transpose());
        }
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let weights = DMatrix::from_fn(n_basis, f, |_, _| normal.sample(&mut rng));
        Ok(Self {
            centers,
            weights,
            lengthscales: DVector::from_element(d, 1.0),
            u_max: DVector::from_column_slice(u_max),
        })
    }

    pub fn n_basis(&self) -> usize {
        self.centers.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (b, d, f) = (self.n_basis(), self.state_dim(), self.action_dim());
        if self.weights.nrows() != b {
            return Err(Error::DimensionMismatch {
                what: "policy weight rows",
                expected: b,
                got: self.weights.nrows(),
            });
        }
        if self.lengthscales.len() != d {
            return Err(Error::DimensionMismatch {
                what: "policy lengthscales",
                expected: d,
                got: self.lengthscales.len(),
            });
        }
        if self.u_max.len() != f {
            return Err(Error::DimensionMismatch {
                what: "policy torque limits",
                expected: f,
                got: self.u_max.len(),
            });
        }
        let finite = self
            .centers
            .iter()
            .chain(self.weights.iter())
            .chain(self.lengthscales.iter())
            .chain(self.u_max.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        if self.lengthscales.iter().chain(self.u_max.iter()).any(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument(
                "policy lengthscales and u_max must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of trainable entries: centers, weights and log-lengthscales.
    pub fn n_params(&self) -> usize {
        let (b, d, f) = (self.n_basis(), self.state_dim(), self.action_dim());
        b * d + b * f + d
    }

    /// Flat trainable vector `[centers (row-major), weights (row-major), ln lengthscales]`.
    /// `u_max` is fixed and not part of it.
    pub fn to_flat(&self) -> Vec<f64> {
        let (b, d, f) = (self.n_basis(), self.state_dim(), self.action_dim());
        let mut v = Vec::with_capacity(self.n_params());
        for i in 0..b {
            for k in 0..d {
                v.push(self.centers[(i, k)]);
            }
        }
        for i in 0..b {
            for j in 0..f {
                v.push(self.weights[(i, j)]);
            }
        }
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v
    }

    /// Inverse of [`PolicyParams::to_flat`], keeping this policy's shape and `u_max`.
    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                what: "flat policy vector",
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let (b, d, f) = (self.n_basis(), self.state_dim(), self.action_dim());
        let centers = DMatrix::from_fn(b, d, |i, k| theta[i * d + k]);
        let off = b * d;
        let weights = DMatrix::from_fn(b, f, |i, j| theta[off + i * f + j]);
        let off = off + b * f;
        let lengthscales = DVector::from_fn(d, |k, _| theta[off + k].exp());
        let p = Self {
            centers,
            weights,
            lengthscales,
            u_max: self.u_max.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    fn scaled_expansion(&self) -> SeExpansion {
        let (b, d, f) = (self.n_basis(), self.state_dim(), self.action_dim());
        SeExpansion {
            centers: DMatrix::from_fn(b, d, |i, k| self.centers[(i, k)] / self.lengthscales[k]),
            weights: self.weights.clone(),
            inv_sq_lengthscales: vec![DVector::from_element(d, 1.0); f],
            signal_variance: vec![1.0; f],
            inv_kernel: None,
            noise_variance: vec![0.0; f],
        }
    }

    /// Preactivation `r(x)`.
    pub fn preactivation(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "policy input",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        let b = self.n_basis();
        let d = self.state_dim();
        let mut r = DVector::zeros(self.action_dim());
        for i in 0..b {
            let mut q = 0.0;
            for k in 0..d {
                let t = (x[k] - self.centers[(i, k)]) / self.lengthscales[k];
                q += t * t;
            }
            let phi = (-0.5 * q).exp();
            for j in 0..self.action_dim() {
                r[j] += self.weights[(i, j)] * phi;
            }
        }
        Ok(r)
    }
}

/// Deterministic action at state `x`; every component satisfies `|u_j| <= u_max_j`.
pub fn policy_eval(params: &PolicyParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let r = params.preactivation(x)?;
    Ok(DVector::from_fn(r.len(), |j, _| params.u_max[j] * r[j].sin()))
}

/// Exact Gaussian moments of `sin(z)` for `z ~ N(mu, sigma)`, scaled by `u_max`,
/// plus the Stein factor `E[d sin(z_j)/dz_j] * u_max_j`.
#[derive(Debug, Clone)]
struct Squash {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    stein: DVector<f64>,
}

fn squash_forward(mu: &DVector<f64>, sigma: &DMatrix<f64>, u_max: &DVector<f64>) -> Squash {
    let f = mu.len();
    let k = DVector::from_fn(f, |j, _| (-0.5 * sigma[(j, j)]).exp());
    let s = DVector::from_fn(f, |j, _| k[j] * mu[j].sin());
    let mut cov = DMatrix::zeros(f, f);
    for i in 0..f {
        for j in i..f {
            let eij = if i == j {
                0.5 * (1.0 - (-2.0 * sigma[(i, i)]).exp() * (2.0 * mu[i]).cos())
            } else {
                let tot = sigma[(i, i)] + sigma[(j, j)];
                let a = (-0.5 * (tot - 2.0 * sigma[(i, j)])).exp();
                let b = (-0.5 * (tot + 2.0 * sigma[(i, j)])).exp();
                0.5 * (a * (mu[i] - mu[j]).cos() - b * (mu[i] + mu[j]).cos())
            };
            let v = u_max[i] * u_max[j] * (eij - s[i] * s[j]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Squash {
        mean: DVector::from_fn(f, |j, _| u_max[j] * s[j]),
        cov,
        stein: DVector::from_fn(f, |j, _| u_max[j] * k[j] * mu[j].cos()),
    }
}

/// Adjoint of [`squash_forward`] given output adjoints and the adjoint of the
/// Stein factor. Returns `(mu_bar, sigma_bar)`.
fn squash_backward(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    u_max: &DVector<f64>,
    mean_bar: &DVector<f64>,
    cov_bar: &DMatrix<f64>,
    stein_bar: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let f = mu.len();
    let k = DVector::from_fn(f, |j, _| (-0.5 * sigma[(j, j)]).exp());
    let s = DVector::from_fn(f, |j, _| k[j] * mu[j].sin());
    let mut mu_bar = DVector::zeros(f);
    let mut sig_bar = DMatrix::zeros(f, f);
    let mut s_bar = DVector::from_fn(f, |j, _| mean_bar[j] * u_max[j]);
    for i in 0..f {
        for j in i..f {
            let w = if i == j {
                cov_bar[(i, i)]
            } else {
                cov_bar[(i, j)] + cov_bar[(j, i)]
            } * u_max[i]
                * u_max[j];
            if w == 0.0 {
                continue;
            }
            s_bar[i] -= w * s[j];
            s_bar[j] -= w * s[i];
            if i == j {
                let e2 = (-2.0 * sigma[(i, i)]).exp();
                sig_bar[(i, i)] += w * e2 * (2.0 * mu[i]).cos();
                mu_bar[i] += w * e2 * (2.0 * mu[i]).sin();
            } else {
                let tot = sigma[(i, i)] + sigma[(j, j)];
                let a = (-0.5 * (tot - 2.0 * sigma[(i, j)])).exp();
                let b = (-0.5 * (tot + 2.0 * sigma[(i, j)])).exp();
                let (dm, sm) = ((mu[i] - mu[j]), (mu[i] + mu[j]));
                let eij = 0.5 * (a * dm.cos() - b * sm.cos());
                mu_bar[i] += w * 0.5 * (-a * dm.sin() + b * sm.sin());
                mu_bar[j] += w * 0.5 * (a * dm.sin() + b * sm.sin());
                sig_bar[(i, i)] -= 0.5 * w * eij;
                sig_bar[(j, j)] -= 0.5 * w * eij;
                let off = 0.5 * w * 0.5 * (a * dm.cos() + b * sm.cos());
                sig_bar[(i, j)] += off;
                sig_bar[(j, i)] += off;
            }
        }
    }
    for j in 0..f {
        // s_j = k_j sin(mu_j)
        mu_bar[j] += s_bar[j] * k[j] * mu[j].cos();
        sig_bar[(j, j)] -= 0.5 * s_bar[j] * s[j];
        // stein_j = u_max_j k_j cos(mu_j)
        let g = u_max[j] * k[j] * mu[j].cos();
        mu_bar[j] -= stein_bar[j] * u_max[j] * s[j];
        sig_bar[(j, j)] -= 0.5 * stein_bar[j] * g;
    }
    (mu_bar, sig_bar)
}

/// Intermediate values of [`policy_moments`] kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct PolicyCache {
    scaled_cov: DMatrix<f64>,
    pre_mean: DVector<f64>,
    pre_cov: DMatrix<f64>,
    /// `Cov[x, r]` in original coordinates, D x F.
    pre_cross: DMatrix<f64>,
    /// Same in scaled coordinates.
    pre_cross_scaled: DMatrix<f64>,
    stein: DVector<f64>,
    moments: MomentCache,
    expansion: SeExpansion,
}

/// Gradient of a scalar with respect to the policy, laid out like [`PolicyParams::to_flat`].
#[derive(Debug, Clone)]
pub(crate) struct PolicyAdjoint {
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    pub theta: Vec<f64>,
}

pub(crate) fn policy_forward(params: &PolicyParams, state: &GaussianState) -> Result<(JointMoments, PolicyCache)> {
    if state.dim() != params.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "policy state distribution",
            expected: params.state_dim(),
            got: state.dim(),
        });
    }
    let d = params.state_dim();
    let ell = &params.lengthscales;
    let scaled_mean = state.mean().component_div(ell);
    let scaled_cov = DMatrix::from_fn(d, d, |k, l| state.cov()[(k, l)] / (ell[k] * ell[l]));
    let expansion = params.scaled_expansion();
    let (mo, cache) = expansion.moments(&scaled_mean, &scaled_cov)?;
    let pre_cross = DMatrix::from_fn(d, params.action_dim(), |k, j| ell[k] * mo.cross[(k, j)]);
    let sq = squash_forward(&mo.mean, &mo.cov, &params.u_max);
    let cross = DMatrix::from_fn(d, params.action_dim(), |k, j| pre_cross[(k, j)] * sq.stein[j]);
    let joint = JointMoments::from_blocks(state, &sq.mean, &sq.cov, &cross)?;
    Ok((
        joint,
        PolicyCache {
            scaled_cov,
            pre_mean: mo.mean,
            pre_cov: mo.cov,
            pre_cross,
            pre_cross_scaled: mo.cross,
            stein: sq.stein,
            moments: cache,
            expansion,
        },
    ))
}

/// Adjoint of [`policy_forward`] from adjoints of the action mean, action
/// covariance and `Cov[state, action]`. State-block adjoints of the joint are
/// not included; the caller adds them.
pub(crate) fn policy_backward(
    params: &PolicyParams,
    state: &GaussianState,
    cache: &PolicyCache,
    action_mean_bar: &DVector<f64>,
    action_cov_bar: &DMatrix<f64>,
    cross_bar: &DMatrix<f64>,
) -> PolicyAdjoint {
    let (b, d, f) = (params.n_basis(), params.state_dim(), params.action_dim());
    let ell = &params.lengthscales;

    // Cov[x, u] = Cov[x, r] * stein
    let pre_cross_bar = DMatrix::from_fn(d, f, |k, j| cross_bar[(k, j)] * cache.stein[j]);
    let stein_bar = DVector::from_fn(f, |j, _| {
        (0..d).map(|k| cross_bar[(k, j)] * cache.pre_cross[(k, j)]).sum::<f64>()
    });
    let (mu_bar, sig_bar) = squash_backward(
        &cache.pre_mean,
        &cache.pre_cov,
        &params.u_max,
        action_mean_bar,
        action_cov_bar,
        &stein_bar,
    );

    let mut ell_bar: DVector<f64> = DVector::zeros(d);
    // Cov[x, r] = diag(ell) Cov[x', r]
    let scaled_cross_bar = DMatrix::from_fn(d, f, |k, j| ell[k] * pre_cross_bar[(k, j)]);
    for k in 0..d {
        for j in 0..f {
            ell_bar[k] += pre_cross_bar[(k, j)] * cache.pre_cross_scaled[(k, j)];
        }
    }
    let adj = MomentAdjoint {
        mean: mu_bar,
        cov: sig_bar,
        cross: scaled_cross_bar,
    };
    let g = cache.expansion.backward(&cache.scaled_cov, &cache.moments, &adj);

    let mut state_mean = DVector::zeros(d);
    let mut state_cov = DMatrix::zeros(d, d);
    for k in 0..d {
        state_mean[k] = g.mean[k] / ell[k];
        ell_bar[k] -= g.mean[k] * state.mean()[k] / (ell[k] * ell[k]);
        for l in 0..d {
            state_cov[(k, l)] = g.cov[(k, l)] / (ell[k] * ell[l]);
            let t = g.cov[(k, l)] * cache.scaled_cov[(k, l)];
            ell_bar[k] -= t / ell[k];
            ell_bar[l] -= t / ell[l];
        }
    }
    let mut theta = vec![0.0; params.n_params()];
    for i in 0..b {
        for k in 0..d {
            theta[i * d + k] = g.centers[(i, k)] / ell[k];
            ell_bar[k] -= g.centers[(i, k)] * params.centers[(i, k)] / (ell[k] * ell[k]);
        }
    }
    let off = b * d;
    for i in 0..b {
        for j in 0..f {
            theta[off + i * f + j] = g.weights[(i, j)];
        }
    }
    let off = off + b * f;
    for k in 0..d {
        theta[off + k] = ell_bar[k] * ell[k];
    }
    PolicyAdjoint {
        state_mean,
        state_cov,
        theta,
    }
}

/// Joint Gaussian over `(state, action)` when the state is `N(m, S)`: exact
/// moments of the RBF preactivation, then exact sine-squashing moments, with
/// `Cov[state, action]` obtained through Stein's lemma.
pub fn policy_moments(params: &PolicyParams, state: &GaussianState) -> Result<JointMoments> {
    params.validate()?;
    policy_forward(params, state).map(|(j, _)| j)
}

/// Moments of the preactivation alone: `(E[r], Cov[r], Cov[x, r])`.
pub fn preactivation_moments(
    params: &PolicyParams,
    state: &GaussianState,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    params.validate()?;
    let (_, c) = policy_forward(params, state)?;
    Ok((c.pre_mean, c.pre_cov, c.pre_cross))
}
