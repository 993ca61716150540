//! Robustness experiments: perturbed evaluation, the training/evaluation grid,
//! an empirical check of the noise-bound generalization radius, and long-format
//! plot data.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::PolicyParams;
use crate::env::{
    estimate_lipschitz, perturb, synthetic_1d_step, InitialState, Pendulum, PendulumParams, PerturbationSpec,
    Synthetic1d,
};
use crate::error::{Error, Result};
use crate::gp::{FitConfig, GpModel, TransitionDataset};
use crate::objective::{CostModel, HazardRegion};
use crate::stats::{derive_seed, median, std_dev};
use crate::training::{append_jsonl, interact, Actor, RunState, TrainConfig};

const STREAM_EVAL_ENV: u64 = 11;
const STREAM_EVAL_PERTURB: u64 = 12;
const STREAM_EVAL_GRID: u64 = 13;
const STREAM_BASELINE: u64 = 14;

/// Real-environment evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub nominal: PendulumParams,
    pub initial: InitialState,
    pub sigma_perturb: f64,
    pub cost: CostModel,
    pub hazard: HazardRegion,
    pub episode_len: usize,
}

impl EvalSpec {
    pub fn from_config(config: &TrainConfig, sigma_perturb: f64) -> Self {
        Self {
            nominal: config.env.clone(),
            initial: config.initial,
            sigma_perturb,
            cost: config.cost_model(),
            hazard: config.hazard,
            episode_len: config.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Negated cost sums, one per run.
    pub returns: Vec<f64>,
    /// Steps spent in the hazard region, one per run.
    pub violations: Vec<usize>,
}

/// Runs `n_runs` episodes of `policy`. Run `r` draws its own parameter
/// perturbation and initial state from streams derived from `(seed, r)`.
pub fn evaluate_policy(policy: &PolicyParams, spec: &EvalSpec, n_runs: usize, seed: u64) -> Result<EvalOutcome> {
    if policy.state_dim() != 3 || policy.action_dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "pendulum policy shape",
            expected: 4,
            got: policy.state_dim() + policy.action_dim(),
        });
    }
    let mut out = EvalOutcome {
        returns: Vec::with_capacity(n_runs),
        violations: Vec::with_capacity(n_runs),
    };
    for r in 0..n_runs as u64 {
        let params = perturb(
            &spec.nominal,
            &PerturbationSpec {
                sigma_perturb: spec.sigma_perturb,
                seed: derive_seed(seed, STREAM_EVAL_PERTURB, r),
            },
        )?;
        let mut env = Pendulum::new(params, spec.initial, derive_seed(seed, STREAM_EVAL_ENV, r))?;
        let run = interact(
            &mut env,
            &Actor::Policy(policy),
            spec.episode_len,
            &spec.cost,
            &spec.hazard,
        )?;
        out.returns.push(run.episode_return());
        out.violations.push(run.violations);
    }
    Ok(out)
}

/// Returns of freshly initialized (untrained) policies, one run each.
pub fn random_policy_baseline(config: &TrainConfig, spec: &EvalSpec, n_runs: usize, seed: u64) -> Result<EvalOutcome> {
    let init = config.initial_distribution()?;
    let mut out = EvalOutcome {
        returns: Vec::with_capacity(n_runs),
        violations: Vec::with_capacity(n_runs),
    };
    for r in 0..n_runs as u64 {
        let policy = PolicyParams::random(
            &init,
            config.n_basis,
            &[config.env.u_max],
            derive_seed(seed, STREAM_BASELINE, r),
        )?;
        let one = evaluate_policy(&policy, spec, 1, derive_seed(seed, STREAM_BASELINE + 1, r))?;
        out.returns.extend(one.returns);
        out.violations.extend(one.violations);
    }
    Ok(out)
}

/// One trained configuration: a noise floor and whether the constraint is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub sigma_low: Option<f64>,
    #[serde(default = "crate::harness::default_true")]
    pub constrained: bool,
}

pub(crate) fn default_true() -> bool {
    true
}

impl Arm {
    /// `0.1`, `none`, or either with a `/unconstrained` suffix.
    pub fn label(&self) -> String {
        let base = match self.sigma_low {
            Some(s) => format!("{s}"),
            None => "none".to_string(),
        };
        if self.constrained {
            base
        } else {
            format!("{base}/unconstrained")
        }
    }
}

fn default_perturbs() -> Vec<f64> {
    vec![0.0, 0.01, 0.1, 0.15, 0.2]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_eval_runs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub arms: Vec<Arm>,
    #[serde(default = "default_perturbs")]
    pub sigma_perturbs: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_runs")]
    pub eval_runs: usize,
    /// Shared training settings; `seed`, `sigma_low` and `constrained` are
    /// overridden per job.
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            arms: vec![
                Arm {
                    sigma_low: Some(0.1),
                    constrained: true,
                },
                Arm {
                    sigma_low: None,
                    constrained: true,
                },
            ],
            sigma_perturbs: default_perturbs(),
            seeds: default_seeds(),
            eval_runs: default_eval_runs(),
            train: TrainConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.sigma_perturbs.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "grid needs at least one arm, perturbation and seed".into(),
            ));
        }
        if self.eval_runs == 0 {
            return Err(Error::InvalidArgument("eval_runs must be positive".into()));
        }
        if self.sigma_perturbs.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "sigma_perturb values must be finite and >= 0".into(),
            ));
        }
        self.train.validate()
    }

    pub fn train_config(&self, arm: &Arm, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            sigma_low: arm.sigma_low,
            constrained: arm.constrained,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub returns: Vec<f64>,
    pub violations: Vec<usize>,
    pub median_return: f64,
    pub std_return: f64,
    pub median_violations: f64,
    pub std_violations: f64,
}

impl SeedResult {
    pub fn new(seed: u64, outcome: EvalOutcome) -> Self {
        let v: Vec<f64> = outcome.violations.iter().map(|&x| x as f64).collect();
        Self {
            seed,
            median_return: median(&outcome.returns).unwrap_or(f64::NAN),
            std_return: std_dev(&outcome.returns).unwrap_or(f64::NAN),
            median_violations: median(&v).unwrap_or(f64::NAN),
            std_violations: std_dev(&v).unwrap_or(f64::NAN),
            returns: outcome.returns,
            violations: outcome.violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub error: String,
}

/// Across-seed aggregates of the per-seed medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub median_return: f64,
    pub std_return: f64,
    pub median_violations: f64,
    pub std_violations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub sigma_low: Option<f64>,
    pub constrained: bool,
    pub sigma_perturb: f64,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<CellFailure>,
}

impl CellReport {
    pub fn summary(&self) -> Option<CellSummary> {
        let r: Vec<f64> = self.seeds.iter().map(|s| s.median_return).collect();
        let v: Vec<f64> = self.seeds.iter().map(|s| s.median_violations).collect();
        Some(CellSummary {
            median_return: median(&r)?,
            std_return: std_dev(&r)?,
            median_violations: median(&v)?,
            std_violations: std_dev(&v)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellReport>,
}

pub const REPORT_CSV_HEADER: [&str; 10] = [
    "sigma_low",
    "constrained",
    "sigma_perturb",
    "n_seeds",
    "n_failed",
    "median_return",
    "std_return",
    "median_violations",
    "std_violations",
    "seeds",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl EvalReport {
    /// One row per cell with across-seed aggregates.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_CSV_HEADER)?;
        for c in &self.cells {
            let s = c.summary();
            let seeds: Vec<String> = c.seeds.iter().map(|s| s.seed.to_string()).collect();
            w.write_record([
                c.label.clone(),
                c.constrained.to_string(),
                format!("{}", c.sigma_perturb),
                c.seeds.len().to_string(),
                c.failures.len().to_string(),
                fmt_opt(s.as_ref().map(|s| s.median_return)),
                fmt_opt(s.as_ref().map(|s| s.std_return)),
                fmt_opt(s.as_ref().map(|s| s.median_violations)),
                fmt_opt(s.as_ref().map(|s| s.std_violations)),
                seeds.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Where grid jobs write logs and checkpoints.
#[derive(Debug, Clone)]
pub struct GridOutput {
    pub log: PathBuf,
    pub checkpoints: PathBuf,
}

/// Trains one model per `(arm, seed)` on the nominal pendulum, then evaluates
/// it at every `sigma_perturb`. A failed job is recorded in each affected cell
/// and the grid continues. Evaluation seeds depend only on `(seed, sigma_perturb index)`,
/// so arms are compared on identical perturbation draws.
pub fn grid_experiment(config: &GridConfig, output: Option<&GridOutput>) -> Result<EvalReport> {
    config.validate()?;
    let mut cells: Vec<CellReport> = Vec::new();
    for arm in &config.arms {
        for &sp in &config.sigma_perturbs {
            cells.push(CellReport {
                label: arm.label(),
                sigma_low: arm.sigma_low,
                constrained: arm.constrained,
                sigma_perturb: sp,
                seeds: Vec::new(),
                failures: Vec::new(),
            });
        }
    }
    let np = config.sigma_perturbs.len();
    for (ai, arm) in config.arms.iter().enumerate() {
        for &seed in &config.seeds {
            let tc = config.train_config(arm, seed);
            let trained = train_job(&tc, arm, output);
            for (pi, &sp) in config.sigma_perturbs.iter().enumerate() {
                let cell = &mut cells[ai * np + pi];
                let result = trained.as_ref().map_err(|e| e.to_string()).and_then(|policy| {
                    let spec = EvalSpec::from_config(&tc, sp);
                    evaluate_policy(
                        policy,
                        &spec,
                        config.eval_runs,
                        derive_seed(seed, STREAM_EVAL_GRID, pi as u64),
                    )
                    .map_err(|e| e.to_string())
                });
                match result {
                    Ok(out) => cell.seeds.push(SeedResult::new(seed, out)),
                    Err(error) => cell.failures.push(CellFailure { seed, error }),
                }
            }
        }
    }
    Ok(EvalReport { cells })
}

#[derive(Serialize)]
struct JobLogRecord<'a> {
    arm: String,
    seed: u64,
    #[serde(flatten)]
    episode: &'a crate::training::EpisodeLog,
}

fn train_job(config: &TrainConfig, arm: &Arm, output: Option<&GridOutput>) -> Result<PolicyParams> {
    let mut run = RunState::new(config.clone())?;
    run.train(|state| {
        if let Some(out) = output {
            let rec = JobLogRecord {
                arm: arm.label(),
                seed: config.seed,
                episode: state.logs.last().expect("episode logged"),
            };
            append_jsonl(&out.log, &rec)?;
        }
        Ok(())
    })?;
    if let Some(out) = output {
        let name = format!("{}-seed{}.json", arm.label().replace('/', "-"), config.seed);
        run.save_checkpoint(out.checkpoints.join(name))?;
    }
    Ok(run.lagrangian.policy)
}

fn default_lemma_sigmas() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

fn default_deltas() -> Vec<f64> {
    vec![0.0, 0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaConfig {
    #[serde(default = "default_lemma_sigmas")]
    pub sigma_lows: Vec<f64>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    pub phi0: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub lipschitz_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            sigma_lows: default_lemma_sigmas(),
            deltas: default_deltas(),
            phi0: 1.0,
            n_train: 60,
            n_eval: 401,
            lipschitz_samples: 10_000,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

impl LemmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval < 2 || self.sigma_lows.is_empty() || self.deltas.is_empty() {
            return Err(Error::InvalidArgument(
                "lemma check needs data, an evaluation grid, bounds and deltas".into(),
            ));
        }
        if self.sigma_lows.iter().chain(&self.deltas).any(|v| !v.is_finite())
            || self.sigma_lows.iter().any(|s| *s < 0.0)
        {
            return Err(Error::InvalidArgument(
                "sigma_lows must be finite and >= 0, deltas finite".into(),
            ));
        }
        if self.lipschitz_samples < 2 || !self.phi0.is_finite() {
            return Err(Error::InvalidArgument(
                "need at least two Lipschitz samples and a finite phi0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub delta: f64,
    /// `sup_x |f(x; phi0 + delta) - f_hat(x)|` over the evaluation grid.
    pub sup_error: f64,
    /// `K |delta| + sigma_eff`.
    pub envelope: f64,
    /// `|K |delta| - sigma_low|`, reported for comparison only.
    pub reference_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaEntry {
    pub sigma_low: f64,
    /// Learned noise standard deviation, never below `sigma_low`.
    pub sigma_eff: f64,
    /// `sigma_low / K`.
    pub delta_max_predicted: f64,
    /// Fraction of held-out points with `|f_hat - f| <= sigma_eff` at `phi0`.
    pub containment: f64,
    pub curve: Vec<DeltaPoint>,
    /// Error at `|delta| = sigma_low / (2K)` against `K |delta| + 2 sigma_eff`.
    pub check_delta: f64,
    pub check_error: f64,
    pub check_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub phi0: f64,
    pub k_hat: f64,
    pub entries: Vec<LemmaEntry>,
}

/// Fits a GP with each noise floor to `sin(phi0 x)` and measures how the
/// prediction error grows when the true parameter moves by `delta`.
pub fn verify_lemma(config: &LemmaConfig) -> Result<LemmaReport> {
    config.validate()?;
    let radius = config
        .deltas
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max)
        .max(config.sigma_lows.iter().fold(0.0, |a, b| a.max(*b)));
    let k_hat = estimate_lipschitz(
        &Synthetic1d,
        &[config.phi0],
        radius.max(1e-6),
        config.lipschitz_samples,
        config.seed,
    )?
    .k;
    if !(k_hat > 0.0) {
        return Err(Error::DegenerateSamples(0.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let xs: Vec<f64> = (0..config.n_train).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let data = TransitionDataset::from_rows(
        1,
        0,
        xs.iter().map(|x| vec![*x]).collect(),
        xs.iter().map(|x| vec![synthetic_1d_step(config.phi0, *x)]).collect(),
    )?;
    let grid: Vec<f64> = (0..config.n_eval)
        .map(|i| -1.0 + 2.0 * i as f64 / (config.n_eval - 1) as f64)
        .collect();
    let sup_error = |model: &GpModel, phi: f64| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &x in &grid {
            let p = model.predict_point(&DVector::from_element(1, x))?;
            worst = worst.max((synthetic_1d_step(phi, x) - p.mean[0]).abs());
        }
        Ok(worst)
    };

    let mut entries = Vec::with_capacity(config.sigma_lows.len());
    for &sl in &config.sigma_lows {
        let model = GpModel::fit(&data, sl, &config.fit)?;
        let sigma_eff = model.noise_std()[0];
        let mut inside = 0usize;
        for &x in &grid {
            let p = model.predict_point(&DVector::from_element(1, x))?;
            if (p.mean[0] - synthetic_1d_step(config.phi0, x)).abs() <= sigma_eff {
                inside += 1;
            }
        }
        let mut curve = Vec::with_capacity(config.deltas.len());
        for &d in &config.deltas {
            curve.push(DeltaPoint {
                delta: d,
                sup_error: sup_error(&model, config.phi0 + d)?,
                envelope: k_hat * d.abs() + sigma_eff,
                reference_band: (k_hat * d.abs() - sl).abs(),
            });
        }
        let check_delta = sl / (2.0 * k_hat);
        entries.push(LemmaEntry {
            sigma_low: sl,
            sigma_eff,
            delta_max_predicted: sl / k_hat,
            containment: inside as f64 / grid.len() as f64,
            curve,
            check_delta,
            check_error: sup_error(&model, config.phi0 + check_delta)?,
            check_bound: k_hat * check_delta + 2.0 * sigma_eff,
        });
    }
    Ok(LemmaReport {
        phi0: config.phi0,
        k_hat,
        entries,
    })
}

/// Long-format row for box plots of returns and violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub sigma_low: String,
    pub sigma_perturb: f64,
    pub seed: u64,
    pub run: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub violations: usize,
}

pub const PLOT_CSV_HEADER: [&str; 6] = ["sigma_low", "sigma_perturb", "seed", "run", "return", "violations"];

pub fn plot_rows(report: &EvalReport) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for c in &report.cells {
        for s in &c.seeds {
            for (run, (r, v)) in s.returns.iter().zip(&s.violations).enumerate() {
                rows.push(PlotRow {
                    sigma_low: c.label.clone(),
                    sigma_perturb: c.sigma_perturb,
                    seed: s.seed,
                    run,
                    ret: *r,
                    violations: *v,
                });
            }
        }
    }
    rows
}

/// Writes one row per (cell, seed, run). `sigma_low` holds the arm label.
pub fn emit_plot_data(report: &EvalReport, path: impl AsRef<Path>) -> Result<usize> {
    let rows = plot_rows(report);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(PLOT_CSV_HEADER)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}

pub fn read_plot_data(path: impl AsRef<Path>) -> Result<Vec<PlotRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != PLOT_CSV_HEADER {
        return Err(Error::Format(format!("unexpected plot-data header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
