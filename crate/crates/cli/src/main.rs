use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amss_core::config::{resolve_output, RunConfig, OUTPUT_ROOT_ENV};
use amss_core::data::{generate, save_dataset};
use amss_core::{plot, sweep, train, verify};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

/// Adaptive subnetwork masking experiments on synthetic multi-modal data.
#[derive(Parser)]
#[command(name = "amss", version)]
struct Cli {
    /// Root directory for relative output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final test accuracy over a grid of per-modality coefficients.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        axis1: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        axis2: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and mean update ratios across temperatures.
    TauSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset file from the `data.*` keys of a config.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "dataset.csv")]
        out: PathBuf,
    },
    /// Render charts from one or more run directories.
    Plot {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient, estimator and sampling self-checks.
    Verify {
        #[arg(long, default_value_t = 200_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output_path(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => resolve_output(p),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_file(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let dir = output_path(&root, out.as_deref().unwrap_or(&cfg.output_dir));
            let outcome = train::run_experiment(&cfg)?;
            train::write_run(&outcome, &dir)?;
            println!(
                "{}: test accuracy {:.4}, macro-F1 {:.4}, branches {:?} -> {}",
                cfg.strategy.name(),
                outcome.final_test.accuracy,
                outcome.final_test.macro_f1,
                outcome.final_test.branch_accuracy,
                dir.display()
            );
        }
        Command::Grid { config, axis1, axis2, out } => {
            let cfg = load_config(&config)?;
            let result = sweep::grid_sweep(&cfg, &axis1, &axis2)?;
            let dir = output_path(&root, out.as_deref().unwrap_or(&cfg.output_dir));
            fs::create_dir_all(&dir)?;
            let path = dir.join("grid.csv");
            fs::write(&path, result.to_csv())?;
            print!("{}", result.to_csv());
            info!("wrote {}", path.display());
        }
        Command::TauSweep { config, taus, out } => {
            let cfg = load_config(&config)?;
            let rows = sweep::tau_sweep(&cfg, &taus)?;
            let dir = output_path(&root, out.as_deref().unwrap_or(&cfg.output_dir));
            fs::create_dir_all(&dir)?;
            let csv = sweep::tau_csv(&rows);
            fs::write(dir.join("tau_sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::GenData { spec, out } => {
            let cfg = load_config(&spec)?;
            let amss_core::config::DataSource::Generate(data_spec) = &cfg.data else {
                bail!("gen-data needs generated-data keys, not data.path");
            };
            let dataset = generate(data_spec)?;
            let path = output_path(&root, &out);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            save_dataset(&dataset, &path)?;
            println!("wrote {} samples to {}", data_spec.total(), path.display());
        }
        Command::Plot { runs, out } => {
            let dirs: Vec<PathBuf> = runs.iter().map(|r| output_path(&root, r)).collect();
            let out = out.map_or_else(|| dirs[0].clone(), |o| output_path(&root, &o));
            for p in plot::emit_plots(&dirs, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { draws, seed } => {
            let reports = verify::run_all(draws, seed)?;
            let mut failed = 0;
            for r in &reports {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
