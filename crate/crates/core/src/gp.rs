//! Probabilistic one-step dynamics: one independent SE-ARD Gaussian process per
//! state dimension, trained on state differences.
//!
//! The likelihood noise is optimized in a transformed space,
//! `sigma_noise = softplus(raw) + bound`, so the learned noise can never drop
//! below the configured floor.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_jittered};
use crate::moments::SeExpansion;
use crate::optim::Adam;

pub const GP_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Likelihood noise standard deviation from its unconstrained parameter.
///
/// `softplus(raw) + bound`, but never less than the next float above `bound`:
/// once `softplus(raw)` drops below half an ulp of `bound` the plain sum
/// would round to `bound` itself and break the strict floor.
pub fn effective_noise(raw: f64, bound: f64) -> f64 {
    (softplus(raw) + bound).max(bound.next_up())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Concatenated `(state, action)` rows.
    pub inputs: Vec<Vec<f64>>,
    /// `next_state - state` rows.
    pub targets: Vec<Vec<f64>>,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Builds a dataset from already-differenced targets.
    pub fn from_rows(
        state_dim: usize,
        action_dim: usize,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let ds = Self {
            state_dim,
            action_dim,
            inputs,
            targets,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn push(&mut self, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim || next_state.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "transition state",
                expected: self.state_dim,
                got: state.len(),
            });
        }
        if action.len() != self.action_dim {
            return Err(Error::DimensionMismatch {
                what: "transition action",
                expected: self.action_dim,
                got: action.len(),
            });
        }
        let row: Vec<f64> = state.iter().chain(action).copied().collect();
        let diff: Vec<f64> = next_state.iter().zip(state).map(|(n, s)| n - s).collect();
        if row.iter().chain(&diff).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transition".into()));
        }
        self.inputs.push(row);
        self.targets.push(diff);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty transition dataset".into()));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset targets",
                expected: self.inputs.len(),
                got: self.targets.len(),
            });
        }
        for row in &self.inputs {
            if row.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    what: "dataset input row",
                    expected: self.input_dim(),
                    got: row.len(),
                });
            }
        }
        for row in &self.targets {
            if row.len() != self.state_dim {
                return Err(Error::DimensionMismatch {
                    what: "dataset target row",
                    expected: self.state_dim,
                    got: row.len(),
                });
            }
        }
        if self
            .inputs
            .iter()
            .chain(&self.targets)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(())
    }

    /// Rows picked by [`select_inducing`], or all rows when `n <= max_points`.
    pub fn subset(&self, max_points: usize) -> TransitionDataset {
        if self.len() <= max_points {
            return self.clone();
        }
        let idx = select_inducing(&self.inputs, &self.targets, max_points);
        TransitionDataset {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Greedy farthest-point selection of `m` rows in std-normalized input space.
///
/// Starts from the lexicographically smallest row and breaks distance ties the
/// same way, so the chosen set does not depend on row order. Returned indices
/// are distinct and sorted by selection order.
pub fn select_inducing(inputs: &[Vec<f64>], targets: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = inputs.len();
    if m >= n {
        return (0..n).collect();
    }
    if m == 0 {
        return Vec::new();
    }
    let e = inputs[0].len();
    let scale: Vec<f64> = (0..e)
        .map(|k| {
            let mut col: Vec<f64> = inputs.iter().map(|r| r[k]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let sd = sorted_std(&col);
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let key = |i: usize| -> (Vec<f64>, &Vec<f64>) { (inputs[i].clone(), &targets[i]) };
    let before = |i: usize, j: usize| -> bool {
        let (a, ta) = key(i);
        let (b, tb) = key(j);
        match lex_cmp(&a, &b) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => lex_cmp(ta, tb) == std::cmp::Ordering::Less,
        }
    };
    let dist2 = |i: usize, j: usize| -> f64 {
        (0..e)
            .map(|k| {
                let d = (inputs[i][k] - inputs[j][k]) * scale[k];
                d * d
            })
            .sum()
    };

    let mut first = 0;
    for i in 1..n {
        if before(i, first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut mind: Vec<f64> = (0..n).map(|i| dist2(i, first)).collect();
    while chosen.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if mind[i] > mind[b] || (mind[i] == mind[b] && before(i, b)) => Some(i),
                keep => keep,
            };
        }
        let pick = best.expect("m < n leaves an untaken row");
        taken[pick] = true;
        chosen.push(pick);
        for i in 0..n {
            if !taken[i] {
                mind[i] = mind[i].min(dist2(i, pick));
            }
        }
    }
    chosen
}

fn sorted_std(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    if sorted.len() < 2 {
        return 0.0;
    }
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    (dev.iter().sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub raw_noise: f64,
    pub noise_bound: f64,
}

impl KernelHyperparams {
    pub fn noise_std(&self) -> f64 {
        effective_noise(self.raw_noise, self.noise_bound)
    }

    pub fn noise_variance(&self) -> f64 {
        let s = self.noise_std();
        s * s
    }

    /// Scale-aware default: per-dimension input std, target variance, 10% target std noise.
    pub fn initial(inputs: &[Vec<f64>], targets: &[f64], bound: f64) -> Self {
        let e = inputs.first().map_or(0, |r| r.len());
        let lengthscales = (0..e)
            .map(|k| {
                let mut col: Vec<f64> = inputs.iter().map(|r| r[k]).collect();
                col.sort_by(|a, b| a.total_cmp(b));
                let sd = sorted_std(&col);
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let mut t = targets.to_vec();
        t.sort_by(|a, b| a.total_cmp(b));
        let sd = sorted_std(&t).max(1e-4);
        Self {
            lengthscales,
            signal_variance: sd * sd,
            raw_noise: softplus_inv(0.1 * sd),
            noise_bound: bound,
        }
    }

    /// Unconstrained optimization vector: `[ln l_1..ln l_E, ln sf2, raw_noise]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.raw_noise);
        v
    }

    pub fn from_vector(v: &[f64], bound: f64) -> Self {
        let e = v.len() - 2;
        Self {
            lengthscales: v[..e].iter().map(|x| x.exp()).collect(),
            signal_variance: v[e].exp(),
            raw_noise: v[e + 1],
            noise_bound: bound,
        }
    }
}

fn se_kernel(x: &DMatrix<f64>, hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = x.nrows();
    let e = x.ncols();
    let inv: Vec<f64> = hp.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let mut q = 0.0;
            for d in 0..e {
                let t = x[(i, d)] - x[(j, d)];
                q += t * t * inv[d];
            }
            let v = hp.signal_variance * (-0.5 * q).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Marginal negative log likelihood of one output and its gradient with
/// respect to [`KernelHyperparams::to_vector`].
pub fn output_nll(x: &DMatrix<f64>, y: &DVector<f64>, hp: &KernelHyperparams) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    let e = x.ncols();
    let kse = se_kernel(x, hp);
    let sn = hp.noise_std();
    let mut k = kse.clone();
    for i in 0..n {
        k[(i, i)] += sn * sn;
    }
    let (chol, _) = cholesky_jittered(&k)?;
    let alpha = chol.solve(y);
    let nll = 0.5 * y.dot(&alpha) + 0.5 * chol_logdet(&chol) + 0.5 * n as f64 * LN_2PI;
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("negative log likelihood with {hp:?}")));
    }
    let kinv = chol.inverse();
    // dNLL/dp = -1/2 tr((alpha alpha^T - K^-1) dK/dp)
    let mut grad = vec![0.0; e + 2];
    let inv: Vec<f64> = hp.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    for i in 0..n {
        for j in 0..n {
            let mij = alpha[i] * alpha[j] - kinv[(i, j)];
            let w = -0.5 * mij * kse[(i, j)];
            if i != j {
                for d in 0..e {
                    let t = x[(i, d)] - x[(j, d)];
                    grad[d] += w * t * t * inv[d];
                }
            }
            grad[e] += w;
        }
    }
    let dnoise = 2.0 * sn * sigmoid(hp.raw_noise);
    let mut tr = 0.0;
    for i in 0..n {
        tr += alpha[i] * alpha[i] - kinv[(i, i)];
    }
    grad[e + 1] = -0.5 * tr * dnoise;
    Ok((nll, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Inducing-set cap; the fit runs on a farthest-point subset beyond this size.
    pub max_inducing: usize,
    /// Whether predictive variances include the likelihood noise.
    pub noise_in_prediction: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 0.01,
            max_inducing: 100,
            noise_in_prediction: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointPrediction {
    /// Posterior mean of the state difference.
    pub mean: DVector<f64>,
    /// Per-dimension posterior variance of the state difference.
    pub variance: DVector<f64>,
    /// `state + mean`.
    pub next_state: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    state_dim: usize,
    action_dim: usize,
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    hypers: Vec<KernelHyperparams>,
    noise_in_prediction: bool,
    expansion: SeExpansion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub format_version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub noise_in_prediction: bool,
    pub hypers: Vec<KernelHyperparams>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl GpModel {
    /// Conditions the per-output GPs on `data` with fixed hyperparameters.
    pub fn new(data: &TransitionDataset, hypers: Vec<KernelHyperparams>, noise_in_prediction: bool) -> Result<Self> {
        data.validate()?;
        if hypers.len() != data.state_dim {
            return Err(Error::DimensionMismatch {
                what: "hyperparameter sets",
                expected: data.state_dim,
                got: hypers.len(),
            });
        }
        for hp in &hypers {
            if hp.lengthscales.len() != data.input_dim() {
                return Err(Error::DimensionMismatch {
                    what: "lengthscales",
                    expected: data.input_dim(),
                    got: hp.lengthscales.len(),
                });
            }
            if hp.noise_bound < 0.0 || hp.signal_variance <= 0.0 || hp.lengthscales.iter().any(|l| *l <= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid hyperparameters {hp:?}")));
            }
        }
        let n = data.len();
        let inputs = DMatrix::from_fn(n, data.input_dim(), |i, k| data.inputs[i][k]);
        let targets = DMatrix::from_fn(n, data.state_dim, |i, k| data.targets[i][k]);

        let mut weights = DMatrix::zeros(n, data.state_dim);
        let mut inv_kernel = Vec::with_capacity(data.state_dim);
        for (a, hp) in hypers.iter().enumerate() {
            let mut k = se_kernel(&inputs, hp);
            let nv = hp.noise_variance();
            for i in 0..n {
                k[(i, i)] += nv;
            }
            let (chol, _) = cholesky_jittered(&k)?;
            let beta = chol.solve(&targets.column(a).into_owned());
            weights.set_column(a, &beta);
            inv_kernel.push(chol.inverse());
        }
        let expansion = SeExpansion {
            centers: inputs.clone(),
            weights,
            inv_sq_lengthscales: hypers
                .iter()
                .map(|hp| DVector::from_iterator(hp.lengthscales.len(), hp.lengthscales.iter().map(|l| 1.0 / (l * l))))
                .collect(),
            signal_variance: hypers.iter().map(|hp| hp.signal_variance).collect(),
            inv_kernel: Some(inv_kernel),
            noise_variance: hypers
                .iter()
                .map(|hp| if noise_in_prediction { hp.noise_variance() } else { 0.0 })
                .collect(),
        };
        Ok(Self {
            state_dim: data.state_dim,
            action_dim: data.action_dim,
            inputs,
            targets,
            hypers,
            noise_in_prediction,
            expansion,
        })
    }

    /// Fits hyperparameters by Adam on the marginal NLL, starting from
    /// [`KernelHyperparams::initial`]. Returns the best iterate seen, so the
    /// final NLL never exceeds the initial one.
    pub fn fit(data: &TransitionDataset, bound: f64, config: &FitConfig) -> Result<Self> {
        if bound < 0.0 || !bound.is_finite() {
            return Err(Error::InvalidArgument(format!("noise bound must be >= 0, got {bound}")));
        }
        data.validate()?;
        let data = data.subset(config.max_inducing);
        let n = data.len();
        let x = DMatrix::from_fn(n, data.input_dim(), |i, k| data.inputs[i][k]);
        let mut hypers = Vec::with_capacity(data.state_dim);
        for a in 0..data.state_dim {
            let ycol: Vec<f64> = data.targets.iter().map(|r| r[a]).collect();
            let y = DVector::from_vec(ycol.clone());
            let init = KernelHyperparams::initial(&data.inputs, &ycol, bound);
            hypers.push(fit_output(&x, &y, init, config)?);
        }
        Self::new(&data, hypers, config.noise_in_prediction)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn n_points(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn hypers(&self) -> &[KernelHyperparams] {
        &self.hypers
    }

    pub fn noise_in_prediction(&self) -> bool {
        self.noise_in_prediction
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.hypers.iter().map(|h| h.noise_std()).collect()
    }

    pub(crate) fn expansion(&self) -> &SeExpansion {
        &self.expansion
    }

    /// Same data and hyperparameters with a different noise floor. Useful for
    /// isolating the effect of the bound with everything else fixed.
    pub fn with_noise_bound(&self, bound: f64) -> Result<Self> {
        let hypers = self
            .hypers
            .iter()
            .map(|h| KernelHyperparams {
                noise_bound: bound,
                ..h.clone()
            })
            .collect();
        Self::new(&self.dataset(), hypers, self.noise_in_prediction)
    }

    /// Training (inducing) set the model is conditioned on.
    pub fn dataset(&self) -> TransitionDataset {
        let n = self.n_points();
        TransitionDataset {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            inputs: (0..n).map(|i| self.inputs.row(i).iter().copied().collect()).collect(),
            targets: (0..n).map(|i| self.targets.row(i).iter().copied().collect()).collect(),
        }
    }

    /// Sum over outputs of the marginal NLL on `data`, using this model's hyperparameters.
    pub fn negative_log_likelihood(&self, data: &TransitionDataset) -> Result<f64> {
        data.validate()?;
        if data.state_dim != self.state_dim || data.action_dim != self.action_dim {
            return Err(Error::DimensionMismatch {
                what: "dataset dimensions",
                expected: self.input_dim(),
                got: data.input_dim(),
            });
        }
        negative_log_likelihood(data, &self.hypers)
    }

    /// Posterior of the state difference at a deterministic `(state, action)` input.
    pub fn predict_point(&self, input: &DVector<f64>) -> Result<PointPrediction> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "prediction input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n = self.n_points();
        let e = self.input_dim();
        let mut mean = DVector::zeros(self.state_dim);
        let mut variance = DVector::zeros(self.state_dim);
        for (a, hp) in self.hypers.iter().enumerate() {
            let ia = &self.expansion.inv_sq_lengthscales[a];
            let kstar = DVector::from_fn(n, |i, _| {
                let mut q = 0.0;
                for d in 0..e {
                    let t = self.inputs[(i, d)] - input[d];
                    q += t * t * ia[d];
                }
                hp.signal_variance * (-0.5 * q).exp()
            });
            mean[a] = kstar.dot(&self.expansion.weights.column(a));
            let ik = &self.expansion.inv_kernel.as_ref().expect("GP expansion carries K^-1")[a];
            let v = hp.signal_variance - kstar.dot(&(ik * &kstar));
            variance[a] = v.max(0.0) + self.expansion.noise_variance[a];
        }
        let next_state = DVector::from_fn(self.state_dim, |k, _| input[k] + mean[k]);
        Ok(PointPrediction {
            mean,
            variance,
            next_state,
        })
    }

    pub fn to_checkpoint(&self) -> GpCheckpoint {
        let ds = self.dataset();
        GpCheckpoint {
            format_version: GP_FORMAT_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            noise_in_prediction: self.noise_in_prediction,
            hypers: self.hypers.clone(),
            inputs: ds.inputs,
            targets: ds.targets,
        }
    }

    pub fn from_checkpoint(ck: &GpCheckpoint) -> Result<Self> {
        if ck.format_version != GP_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                supported: GP_FORMAT_VERSION,
            });
        }
        let data = TransitionDataset::from_rows(ck.state_dim, ck.action_dim, ck.inputs.clone(), ck.targets.clone())?;
        Self::new(&data, ck.hypers.clone(), ck.noise_in_prediction)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        check_version(&value, GP_FORMAT_VERSION)?;
        let ck: GpCheckpoint = serde_json::from_value(value)?;
        Self::from_checkpoint(&ck)
    }
}

/// Reads `format_version` before full deserialization so a newer file reports
/// a version error rather than a schema error.
pub(crate) fn check_version(value: &serde_json::Value, supported: u32) -> Result<()> {
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("missing format_version".into()))?;
    if found != supported as u64 {
        return Err(Error::Version {
            found: found as u32,
            supported,
        });
    }
    Ok(())
}

/// Sum over output dimensions of the GP marginal NLL.
pub fn negative_log_likelihood(data: &TransitionDataset, hypers: &[KernelHyperparams]) -> Result<f64> {
    data.validate()?;
    let n = data.len();
    let x = DMatrix::from_fn(n, data.input_dim(), |i, k| data.inputs[i][k]);
    let mut total = 0.0;
    for (a, hp) in hypers.iter().enumerate() {
        let y = DVector::from_fn(n, |i, _| data.targets[i][a]);
        total += output_nll(&x, &y, hp)?.0;
    }
    Ok(total)
}

fn fit_output(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    init: KernelHyperparams,
    config: &FitConfig,
) -> Result<KernelHyperparams> {
    let bound = init.noise_bound;
    let mut params = init.to_vector();
    let mut adam = Adam::new(config.learning_rate, params.len());
    let (mut best_nll, mut grad) = output_nll(x, y, &init)?;
    let mut best = params.clone();
    for _ in 0..config.iterations {
        adam.step(&mut params, &grad);
        let hp = KernelHyperparams::from_vector(&params, bound);
        match output_nll(x, y, &hp) {
            Ok((nll, g)) => {
                if nll < best_nll {
                    best_nll = nll;
                    best = params.clone();
                }
                grad = g;
            }
            Err(Error::NonFinite(_)) => {
                return Err(Error::NonFinite(format!(
                    "NLL diverged; last finite iterate {:?} (nll {best_nll})",
                    KernelHyperparams::from_vector(&best, bound)
                )))
            }
            // A failed factorization at a trial point: keep the best iterate.
            Err(Error::CholeskyFailure { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(KernelHyperparams::from_vector(&best, bound))
}
