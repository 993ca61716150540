//! Closed-form propagation of Gaussian state distributions through the GP
//! dynamics by exact moment matching.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::linalg::{repair_psd, symmetrize};
use crate::moments::{MomentAdjoint, MomentCache};

/// Mean and covariance of a Gaussian. The covariance is symmetrized and
/// checked to be PSD (up to [`crate::linalg::PSD_TOLERANCE`]) on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "Gaussian covariance",
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean".into()));
        }
        let cov = repair_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    /// A point mass at `mean`.
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// Joint Gaussian over a `(state, action)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMoments {
    pub state_dim: usize,
    /// `[state mean; action mean]`.
    pub mean: DVector<f64>,
    /// Full `(D+F) x (D+F)` covariance.
    pub cov: DMatrix<f64>,
    /// `Cov[state, action]`, the off-diagonal `D x F` block of `cov`.
    pub cross_cov: DMatrix<f64>,
}

impl JointMoments {
    pub fn from_blocks(
        state: &GaussianState,
        action_mean: &DVector<f64>,
        action_cov: &DMatrix<f64>,
        cross_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let d = state.dim();
        let f = action_mean.len();
        if cross_cov.nrows() != d || cross_cov.ncols() != f {
            return Err(Error::DimensionMismatch {
                what: "state-action cross covariance",
                expected: d * f,
                got: cross_cov.len(),
            });
        }
        let mut mean = DVector::zeros(d + f);
        mean.rows_mut(0, d).copy_from(state.mean());
        mean.rows_mut(d, f).copy_from(action_mean);
        let mut cov = DMatrix::zeros(d + f, d + f);
        cov.view_mut((0, 0), (d, d)).copy_from(state.cov());
        cov.view_mut((0, d), (d, f)).copy_from(cross_cov);
        cov.view_mut((d, 0), (f, d)).copy_from(&cross_cov.transpose());
        cov.view_mut((d, d), (f, f)).copy_from(action_cov);
        Ok(Self {
            state_dim: d,
            mean,
            cov: symmetrize(&cov),
            cross_cov: cross_cov.clone(),
        })
    }

    pub fn as_gaussian(&self) -> Result<GaussianState> {
        GaussianState::new(self.mean.clone(), self.cov.clone())
    }
}

fn check_input(model: &GpModel, mean: &DVector<f64>) -> Result<()> {
    if mean.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "GP input distribution",
            expected: model.input_dim(),
            got: mean.len(),
        });
    }
    Ok(())
}

/// Moments of the predicted state difference for a Gaussian `(state, action)`
/// input. Returns the difference distribution and `Cov[input, difference]`
/// (`(D+F) x D`).
pub fn propagate_gp(model: &GpModel, input: &GaussianState) -> Result<(GaussianState, DMatrix<f64>)> {
    check_input(model, input.mean())?;
    let (mo, _) = model.expansion().moments(input.mean(), input.cov())?;
    Ok((GaussianState::new(mo.mean, mo.cov)?, mo.cross))
}

/// Intermediate values of one transition, kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct TransitionCache {
    joint_cov: DMatrix<f64>,
    moments: MomentCache,
}

pub(crate) fn transition_forward(model: &GpModel, joint: &JointMoments) -> Result<(GaussianState, TransitionCache)> {
    check_input(model, &joint.mean)?;
    let d = joint.state_dim;
    if d != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "joint state dimension",
            expected: model.state_dim(),
            got: d,
        });
    }
    let (mo, cache) = model.expansion().moments(&joint.mean, &joint.cov)?;
    let m = joint.mean.rows(0, d) + &mo.mean;
    let cxd = mo.cross.rows(0, d);
    let s = joint.cov.view((0, 0), (d, d)) + &mo.cov + cxd + cxd.transpose();
    let next = GaussianState::new(m, s)?;
    Ok((
        next,
        TransitionCache {
            joint_cov: joint.cov.clone(),
            moments: cache,
        },
    ))
}

/// Adjoint of [`transition_forward`] with respect to the joint input. The PSD
/// repair of the output is treated as the identity.
pub(crate) fn transition_backward(
    model: &GpModel,
    cache: &TransitionCache,
    next_mean_bar: &DVector<f64>,
    next_cov_bar: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = model.state_dim();
    let e = model.input_dim();
    let mut cross = DMatrix::zeros(e, d);
    cross
        .view_mut((0, 0), (d, d))
        .copy_from(&(next_cov_bar + next_cov_bar.transpose()));
    let adj = MomentAdjoint {
        mean: next_mean_bar.clone(),
        cov: next_cov_bar.clone(),
        cross,
    };
    let g = model.expansion().backward(&cache.joint_cov, &cache.moments, &adj);
    let mut mean_bar = g.mean;
    let mut cov_bar = g.cov;
    for k in 0..d {
        mean_bar[k] += next_mean_bar[k];
    }
    let mut block = cov_bar.view_mut((0, 0), (d, d));
    block += next_cov_bar;
    (mean_bar, symmetrize(&cov_bar))
}

/// Successor state distribution: state mean plus predicted difference, with
/// covariance `S + S_diff + C + C^T` where `C = Cov[state, difference]`.
pub fn next_state_distribution(model: &GpModel, state_action: &JointMoments) -> Result<GaussianState> {
    transition_forward(model, state_action).map(|(s, _)| s)
}

/// Monte-Carlo reference for [`propagate_gp`]: samples inputs, evaluates the
/// exact pointwise GP posterior, and combines means and variances by the law of
/// total variance. Deterministic in `seed`.
pub fn mc_propagate_oracle(
    model: &GpModel,
    input: &GaussianState,
    n_samples: usize,
    seed: u64,
) -> Result<GaussianState> {
    check_input(model, input.mean())?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    let e = input.dim();
    let d = model.state_dim();
    let l = psd_sqrt_factor(input.cov());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    let mut var_sum = DVector::zeros(d);
    let mut z = DVector::zeros(e);
    // Welford-style accumulation around a running mean for stability.
    let mut count = 0.0;
    for _ in 0..n_samples {
        for k in 0..e {
            z[k] = StandardNormal.sample(&mut rng);
        }
        let x = input.mean() + &l * &z;
        let p = model.predict_point(&x)?;
        count += 1.0;
        let delta = &p.mean - &sum;
        sum += &delta / count;
        let delta2 = &p.mean - &sum;
        outer += &delta * delta2.transpose();
        var_sum += &p.variance;
    }
    let mut cov = symmetrize(&outer) / count;
    for k in 0..d {
        cov[(k, k)] += var_sum[k] / count;
    }
    GaussianState::new(sum, cov)
}

/// A factor `L` with `L L^T = S` for PSD `S` (eigen-based, tolerates singular `S`).
pub fn psd_sqrt_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(s).symmetric_eigen();
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
}
