//! Command-line harness for the distribution-shift conformal pipeline.
//!
//! Four stages, runnable independently: `synth` writes a synthetic CSV
//! dataset, `fit` fits the physical predictors and prints their
//! parameters, `run` executes the full weighted-conformal experiment and
//! writes reports, and `report` recomputes summary statistics from a
//! run's divergence curve and checks them against its `summary.csv`.
//!
//! Experiments are described by a TOML config file; every config field
//! can be overridden by a command-line flag of the same name. Exit
//! codes: 0 on success, 1 when an experiment stage fails, 2 on usage
//! errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use shiftcp::conformal::conformal_score;
use shiftcp::data::{
    chronological_split, load_epidemic_csv, load_traffic_csv, rd_samples, synth_epidemic,
    synth_traffic, write_epidemic_csv, write_traffic_csv, EpidemicSynthConfig, ShiftProfile,
    TrafficSynthConfig,
};
use shiftcp::epidemic::{fit_epidemic_transitions, transitions, EpiTransition, EpiVariant};
use shiftcp::pipeline::{
    comparison_table, emit_reports, rate_grid, read_summary_csv, run_experiment, verify_summary,
    DomainMode, ExperimentConfig, ModelKind, Task, WeightMode,
};
use shiftcp::traffic::{FitOptions, RdSample, RdVariant};

#[derive(Parser)]
#[command(
    name = "shiftcp",
    version,
    about = "Conformal prediction under distribution shift: weighted split \
             conformal sets for physics-informed traffic and epidemic \
             predictors, with coverage-divergence diagnostics."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, write it as CSV, and print the
    /// generating parameters as JSON.
    Synth {
        #[command(flatten)]
        overrides: Box<ConfigOverrides>,
        /// Where to write the CSV dataset.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Fit the physical predictors on the training block and print
    /// their parameters as JSON (no conformal evaluation).
    Fit {
        #[command(flatten)]
        overrides: Box<ConfigOverrides>,
    },
    /// Run the full experiment: fit, calibrate, sweep the α grid across
    /// test domains, write reports, and print a comparison table.
    Run {
        #[command(flatten)]
        overrides: Box<ConfigOverrides>,
    },
    /// Recompute summary statistics from a run directory's
    /// divergence_curve.csv and verify them against its summary.csv.
    Report {
        /// Directory holding divergence_curve.csv and summary.csv.
        #[arg(long, default_value = "reports", value_name = "DIR")]
        dir: PathBuf,
    },
}

/// Experiment description: an optional TOML file plus per-field
/// overrides. Flag names match config field names; `--noise-sd` and
/// `--data` apply to whichever task is active.
#[derive(Debug, Default, Args)]
struct ConfigOverrides {
    /// TOML experiment config; the flags below override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Experiment family: traffic or epidemic.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Model ids to compare, comma-separated (e.g. rd_u,rd_uq).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Replication seeds, comma-separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Miscoverage grid, comma-separated and strictly increasing.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Query-weight handling: per_query or shared.
    #[arg(long, value_parser = parse_weight_mode)]
    weight_mode: Option<WeightMode>,
    /// Test-domain partition: hour_of_day, pandemic_interval, or whole.
    #[arg(long, value_parser = parse_domain_mode)]
    domains: Option<DomainMode>,
    /// Output directory for reports.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,
    /// Training fraction of the chronological split.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Calibration fraction of the chronological split.
    #[arg(long)]
    cal_frac: Option<f64>,
    /// Test fraction of the chronological split.
    #[arg(long)]
    test_frac: Option<f64>,
    /// KDE bandwidth candidates, comma-separated.
    #[arg(long, value_delimiter = ',')]
    bandwidths: Option<Vec<f64>>,
    /// Density floor of the likelihood ratio.
    #[arg(long)]
    floor: Option<f64>,
    /// Upper cap on the likelihood ratio.
    #[arg(long)]
    cap: Option<f64>,
    /// Cross-validation folds of the bandwidth search.
    #[arg(long)]
    folds: Option<usize>,
    /// Base seed of the cross-validation shuffle.
    #[arg(long)]
    cv_seed: Option<u64>,
    /// Synthetic traffic: days to simulate.
    #[arg(long)]
    n_days: Option<usize>,
    /// Observation-noise level of the active task's synthetic world.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Demand-cycle amplitude of the synthetic traffic world.
    #[arg(long)]
    demand_amplitude: Option<f64>,
    /// Volume-volatility contrast of the synthetic traffic world.
    #[arg(long)]
    volatility_contrast: Option<f64>,
    /// Fit per-density-regime parameters for the speed+volume model
    /// (true or false).
    #[arg(long)]
    density_buckets: Option<bool>,
    /// Gradient-descent iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient-descent step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Gradient-descent improvement tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// CSV dataset of the active task, replacing the synthetic world.
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// Synthetic epidemic: seasons to simulate.
    #[arg(long)]
    n_years: Option<usize>,
    /// Points per axis of the epidemic rate-parameter search grid.
    #[arg(long)]
    grid_steps: Option<usize>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "traffic" => Ok(Task::Traffic),
        "epidemic" => Ok(Task::Epidemic),
        _ => Err(format!("unknown task {s:?} (expected traffic or epidemic)")),
    }
}

fn parse_weight_mode(s: &str) -> Result<WeightMode, String> {
    match s {
        "per_query" => Ok(WeightMode::PerQuery),
        "shared" => Ok(WeightMode::Shared),
        _ => Err(format!(
            "unknown weight mode {s:?} (expected per_query or shared)"
        )),
    }
}

fn parse_domain_mode(s: &str) -> Result<DomainMode, String> {
    match s {
        "hour_of_day" => Ok(DomainMode::HourOfDay),
        "pandemic_interval" => Ok(DomainMode::PandemicInterval),
        "whole" => Ok(DomainMode::Whole),
        _ => Err(format!(
            "unknown domain mode {s:?} (expected hour_of_day, pandemic_interval, or whole)"
        )),
    }
}

impl ConfigOverrides {
    /// Load the config file (or the defaults) and lay the flag
    /// overrides on top; task-routed flags follow the effective task.
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(task) = self.task {
            config.task = task;
        }
        if let Some(models) = &self.models {
            config.models = models.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(alphas) = &self.alphas {
            config.alphas = alphas.clone();
        }
        if let Some(mode) = self.weight_mode {
            config.weight_mode = mode;
        }
        if let Some(domains) = self.domains {
            config.domains = Some(domains);
        }
        if let Some(out_dir) = &self.out_dir {
            config.out_dir = out_dir.clone();
        }
        if let Some(v) = self.train_frac {
            config.split.train_frac = v;
        }
        if let Some(v) = self.cal_frac {
            config.split.cal_frac = v;
        }
        if let Some(v) = self.test_frac {
            config.split.test_frac = v;
        }
        if let Some(bandwidths) = &self.bandwidths {
            config.kde.bandwidths = bandwidths.clone();
        }
        if let Some(v) = self.floor {
            config.kde.floor = v;
        }
        if let Some(v) = self.cap {
            config.kde.cap = v;
        }
        if let Some(v) = self.folds {
            config.kde.folds = v;
        }
        if let Some(v) = self.cv_seed {
            config.kde.cv_seed = v;
        }
        if let Some(v) = self.n_days {
            config.traffic.n_days = v;
        }
        if let Some(v) = self.noise_sd {
            match config.task {
                Task::Traffic => config.traffic.noise_sd = v,
                Task::Epidemic => config.epidemic.noise_sd = v,
            }
        }
        if let Some(v) = self.demand_amplitude {
            config.traffic.demand_amplitude = v;
        }
        if let Some(v) = self.volatility_contrast {
            config.traffic.volatility_contrast = v;
        }
        if let Some(v) = self.density_buckets {
            config.traffic.density_buckets = v;
        }
        if let Some(v) = self.max_iters {
            config.traffic.max_iters = v;
        }
        if let Some(v) = self.step_size {
            config.traffic.step_size = v;
        }
        if let Some(v) = self.tolerance {
            config.traffic.tolerance = v;
        }
        if let Some(data) = &self.data {
            match config.task {
                Task::Traffic => config.traffic.data = Some(data.clone()),
                Task::Epidemic => config.epidemic.data = Some(data.clone()),
            }
        }
        if let Some(v) = self.n_years {
            config.epidemic.n_years = v;
        }
        if let Some(v) = self.grid_steps {
            config.epidemic.grid_steps = v;
        }
        config.validate()?;
        Ok(config)
    }
}

fn cmd_synth(config: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let seed = config.seeds[0];
    let truth = match config.task {
        Task::Traffic => {
            let t = &config.traffic;
            let (dataset, truth) = synth_traffic(&TrafficSynthConfig {
                seed,
                n_days: t.n_days,
                noise_sd: t.noise_sd,
                shift: ShiftProfile {
                    demand_amplitude: t.demand_amplitude,
                    volatility_contrast: t.volatility_contrast,
                },
            });
            write_traffic_csv(&dataset, out)
                .with_context(|| format!("writing {}", out.display()))?;
            serde_json::to_value(&truth)?
        }
        Task::Epidemic => {
            let e = &config.epidemic;
            let (series, truth) = synth_epidemic(&EpidemicSynthConfig {
                seed,
                n_years: e.n_years,
                noise_sd: e.noise_sd,
            });
            write_epidemic_csv(std::slice::from_ref(&series), out)
                .with_context(|| format!("writing {}", out.display()))?;
            serde_json::to_value(&truth)?
        }
    };
    log::info!("wrote {}", out.display());
    println!("{}", serde_json::to_string_pretty(&truth)?);
    Ok(())
}

/// Fit each requested model on the chronological training block and
/// return `{model_id: parameters}` as JSON.
fn fit_models(config: &ExperimentConfig) -> anyhow::Result<serde_json::Value> {
    let seed = config.seeds[0];
    let mut fitted = BTreeMap::new();
    match config.task {
        Task::Traffic => {
            let t = &config.traffic;
            let dataset = match &t.data {
                Some(path) => load_traffic_csv(Path::new(path))?.0,
                None => {
                    synth_traffic(&TrafficSynthConfig {
                        seed,
                        n_days: t.n_days,
                        noise_sd: t.noise_sd,
                        shift: ShiftProfile {
                            demand_amplitude: t.demand_amplitude,
                            volatility_contrast: t.volatility_contrast,
                        },
                    })
                    .0
                }
            };
            let sensor = shiftcp::pipeline::pick_sensor(&dataset)?;
            let samples = rd_samples(&dataset, &sensor)?;
            let (train, cal, _test) = chronological_split(&samples, &config.split)?;
            let train: Vec<RdSample<f64>> = train.into_iter().map(|s| s.sample).collect();
            let options = FitOptions {
                max_iters: t.max_iters,
                step_size: t.step_size,
                tolerance: t.tolerance,
            };
            for model in config.resolved_models()? {
                let variant = match model {
                    ModelKind::RdU => RdVariant::SpeedOnly,
                    ModelKind::RdUq => RdVariant::SpeedVolume,
                    _ => unreachable!("validated against task"),
                };
                let sensor_model = shiftcp::pipeline::fit_sensor_model(
                    variant,
                    &train,
                    t.density_buckets,
                    &options,
                )?;
                let scores: Vec<f64> = cal
                    .iter()
                    .map(|s| Ok(conformal_score(sensor_model.predict(&s.sample)?, s.sample.target)))
                    .collect::<shiftcp::Result<_>>()?;
                fitted.insert(
                    model.id(),
                    serde_json::json!({
                        "sensor": sensor,
                        "parameters": sensor_model,
                        "calibration_score_mean": mean(&scores),
                    }),
                );
            }
        }
        Task::Epidemic => {
            let e = &config.epidemic;
            let series = match &e.data {
                Some(path) => load_epidemic_csv(Path::new(path))?.swap_remove(0),
                None => {
                    synth_epidemic(&EpidemicSynthConfig {
                        seed,
                        n_years: e.n_years,
                        noise_sd: e.noise_sd,
                    })
                    .0
                }
            };
            let trans: Vec<EpiTransition<f64>> = transitions(&series);
            let (train, _cal, _test) = chronological_split(&trans, &config.split)?;
            let grid = rate_grid(e.grid_steps);
            for model in config.resolved_models()? {
                let variant = match model {
                    ModelKind::Sir => EpiVariant::Sir,
                    ModelKind::Sis => EpiVariant::Sis,
                    _ => unreachable!("validated against task"),
                };
                let fit =
                    fit_epidemic_transitions(variant, &train, series.population, &grid, &grid)?;
                fitted.insert(
                    model.id(),
                    serde_json::json!({
                        "location": series.location,
                        "parameters": fit.params,
                        "train_mse": fit.mse,
                    }),
                );
            }
        }
    }
    Ok(serde_json::to_value(fitted)?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cmd_run(config: &ExperimentConfig) -> anyhow::Result<()> {
    let outcome = run_experiment(config)?;
    let dir = Path::new(&config.out_dir);
    emit_reports(&outcome, dir).with_context(|| {
        format!(
            "writing reports to {} (the directory may hold partial outputs)",
            dir.display()
        )
    })?;
    println!("{}", comparison_table(&outcome.summary));
    println!(
        "wrote {} report files plus divergence_curve.csv and summary.csv to {}",
        outcome.reports.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_report(dir: &Path) -> anyhow::Result<()> {
    let mismatches = verify_summary(dir)
        .with_context(|| format!("reading run outputs from {}", dir.display()))?;
    if !mismatches.is_empty() {
        for m in &mismatches {
            eprintln!("mismatch: {m}");
        }
        anyhow::bail!(
            "summary.csv disagrees with divergence_curve.csv in {} place(s)",
            mismatches.len()
        );
    }
    let summary = read_summary_csv(&dir.join("summary.csv"))?;
    println!("{}", comparison_table(&summary));
    println!("summary.csv matches the statistics recomputed from divergence_curve.csv");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { overrides, out } => overrides
            .resolve()
            .and_then(|config| cmd_synth(&config, out)),
        Command::Fit { overrides } => overrides.resolve().and_then(|config| {
            let fitted = fit_models(&config)?;
            println!("{}", serde_json::to_string_pretty(&fitted)?);
            Ok(())
        }),
        Command::Run { overrides } => overrides.resolve().and_then(|config| cmd_run(&config)),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
