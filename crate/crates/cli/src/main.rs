//! Command-line front end: training runs, perturbed evaluation, the robustness
//! grid, the generalization-radius check and plot-data export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pilco_core::harness::{
    emit_plot_data, evaluate_policy, grid_experiment, verify_lemma, CellReport, GridOutput, SeedResult,
};
use pilco_core::training::append_jsonl;
use pilco_core::{EvalReport, EvalSpec, GridConfig, LemmaConfig, RunState, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "pilco",
    version,
    about = "Noise-bounded, chance-constrained model-based policy search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy on the nominal pendulum.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpointed policy under perturbed physics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma_perturb: f64,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write report.json and report.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (arm, seed) pair and evaluate across perturbation levels.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure how far the noise bound's predicted radius holds on synthetic systems.
    VerifyLemma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flatten a report into long-format CSV rows.
    EmitPlotData {
        #[arg(long)]
        report: PathBuf,
        /// Defaults to plot_data.csv next to the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] pilco_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Reads and validates a JSON config. Unreadable files are hard errors;
/// malformed or invalid contents are config errors.
fn load_config<T: serde::de::DeserializeOwned>(
    path: &Path,
    validate: impl FnOnce(&T) -> pilco_core::Result<()>,
) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_ctx(format!("reading {}", path.display())))?;
    let config_err = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let config: T = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    validate(&config).map_err(|e| config_err(e.to_string()))?;
    Ok(config)
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("checkpoints")).map_err(io_ctx(format!("creating {}", root.display())))?;
        let log = root.join("log.jsonl");
        if log.exists() {
            fs::remove_file(&log).map_err(io_ctx(format!("clearing {}", log.display())))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_config(&self, value: &impl serde::Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(pilco_core::Error::from)?;
        fs::write(self.path("config.json"), text).map_err(io_ctx("writing config.json"))
    }

    fn write_report(&self, report: &EvalReport) -> Result<(), CliError> {
        report.save_json(self.path("report.json"))?;
        report.write_csv(self.path("report.csv"))?;
        Ok(())
    }
}

fn single_cell_report(
    config: &TrainConfig,
    sigma_perturb: f64,
    seed: u64,
    outcome: pilco_core::harness::EvalOutcome,
) -> EvalReport {
    let arm = pilco_core::harness::Arm {
        sigma_low: config.sigma_low,
        constrained: config.constrained,
    };
    EvalReport {
        cells: vec![CellReport {
            label: arm.label(),
            sigma_low: config.sigma_low,
            constrained: config.constrained,
            sigma_perturb,
            seeds: vec![SeedResult::new(seed, outcome)],
            failures: Vec::new(),
        }],
    }
}

fn train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: TrainConfig = load_config(config_path, TrainConfig::validate)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&config)?;
    let log = dir.path("log.jsonl");
    let checkpoints = dir.path("checkpoints");
    let mut run = RunState::new(config.clone())?;
    run.train(|state| {
        let entry = state.logs.last().expect("episode logged");
        append_jsonl(&log, entry)?;
        state.save_checkpoint(checkpoints.join(format!("episode-{:03}.json", entry.episode)))?;
        eprintln!(
            "episode {:>3}  return {:>8.3}  violations {:>2}  lambda {:.3}",
            entry.episode, entry.real_return, entry.real_violations, state.lagrangian.lambda
        );
        Ok(())
    })?;
    run.save_checkpoint(checkpoints.join("final.json"))?;

    let spec = EvalSpec::from_config(&config, 0.0);
    let outcome = evaluate_policy(run.policy(), &spec, 10, config.seed)?;
    let report = single_cell_report(&config, 0.0, config.seed, outcome);
    dir.write_report(&report)?;
    println!("{}", dir.path("report.json").display());
    Ok(())
}

fn eval(checkpoint: &Path, sigma_perturb: f64, runs: usize, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    if !(sigma_perturb.is_finite() && sigma_perturb >= 0.0) || runs == 0 {
        return Err(pilco_core::Error::InvalidArgument("need sigma_perturb >= 0 and runs > 0".into()).into());
    }
    let run = RunState::load_checkpoint(checkpoint)?;
    let spec = EvalSpec::from_config(&run.config, sigma_perturb);
    let outcome = evaluate_policy(run.policy(), &spec, runs, seed)?;
    let report = single_cell_report(&run.config, sigma_perturb, seed, outcome);
    if let Some(dir) = out {
        let dir = RunDir::create(dir)?;
        dir.write_config(&json!({
            "checkpoint": checkpoint,
            "sigma_perturb": sigma_perturb,
            "runs": runs,
            "seed": seed,
        }))?;
        dir.write_report(&report)?;
    }
    let s = &report.cells[0].seeds[0];
    let summary = json!({
        "sigma_perturb": sigma_perturb,
        "runs": runs,
        "median_return": s.median_return,
        "std_return": s.std_return,
        "median_violations": s.median_violations,
        "std_violations": s.std_violations,
        "returns": s.returns,
        "violations": s.violations,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(pilco_core::Error::from)?
    );
    Ok(())
}

fn grid(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: GridConfig = load_config(config_path, GridConfig::validate)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&config)?;
    let output = GridOutput {
        log: dir.path("log.jsonl"),
        checkpoints: dir.path("checkpoints"),
    };
    let report = grid_experiment(&config, Some(&output))?;
    dir.write_report(&report)?;
    let failed: usize = report.cells.iter().map(|c| c.failures.len()).sum();
    if failed > 0 {
        eprintln!("{failed} cell evaluations failed; see report.json");
    }
    println!("{}", dir.path("report.json").display());
    Ok(())
}

fn lemma(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config: LemmaConfig = load_config(config_path, LemmaConfig::validate)?;
    let report = verify_lemma(&config)?;
    let text = serde_json::to_string_pretty(&report).map_err(pilco_core::Error::from)?;
    if let Some(dir) = out {
        let dir = RunDir::create(dir)?;
        dir.write_config(&config)?;
        fs::write(dir.path("report.json"), &text).map_err(io_ctx("writing report.json"))?;
    }
    for e in &report.entries {
        eprintln!(
            "sigma_low {:<5} predicted radius {:.4}  holds at delta {:.3}: {}",
            e.sigma_low,
            e.delta_max_predicted,
            e.check_delta,
            e.check_error <= e.check_bound
        );
    }
    println!("{text}");
    Ok(())
}

fn plot(report_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let report = EvalReport::load_json(report_path)?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => report_path.with_file_name("plot_data.csv"),
    };
    let rows = emit_plot_data(&report, &target)?;
    eprintln!("{rows} rows");
    println!("{}", target.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            sigma_perturb,
            runs,
            seed,
            out,
        } => eval(&checkpoint, sigma_perturb, runs, seed, out.as_deref()),
        Command::Grid { config, out } => grid(&config, &out),
        Command::VerifyLemma { config, out } => lemma(&config, out.as_deref()),
        Command::EmitPlotData { report, out } => plot(&report, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
