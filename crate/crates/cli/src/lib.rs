//! Command-line surface of the patchformer forecaster: argument parsing,
//! config resolution, subcommand dispatch and exit codes.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Grid;
use crate::config::{parse_synth_spec, Overrides, RunConfig};
use crate::error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "patchformer",
    version,
    about = "Patch-embedding transformer for long-horizon forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus per-field flags; flags win over the file, the file over defaults.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file with RunConfig field names as keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub set: Overrides,
}

impl RunArgs {
    pub fn resolve(&self, base: RunConfig) -> CliResult<RunConfig> {
        RunConfig::resolve(base, self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes checkpoints, loss trace, metrics and manifest
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resolve the config, write the manifest and stop
        #[arg(long)]
        dry_run: bool,
    },
    /// Score checkpoints and the repeat-last baseline on the test split
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to score (repeatable)
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Also emit raw-unit (inverse-scaled) rows
        #[arg(long)]
        raw: bool,
    },
    /// Forecast the next O steps after a window of exactly I rows
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with a `date` column and the checkpoint's channels
        #[arg(long)]
        window: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every gradient of a small model
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Deliberately break one backward rule (negative control)
        #[arg(long)]
        corrupt_grad: bool,
    },
    /// Write a synthetic multi-energy dataset as CSV
    Synth {
        /// Spec file or inline `key=value,...` (default: built-in spec)
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score a grid of runs and emit the results table
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        grid: Grid,
    },
}

/// Runs one parsed command, printing human-readable progress and results.
pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Train { run, dry_run } => {
            let cfg = run.resolve(RunConfig::default())?;
            match commands::cmd_train(&cfg, dry_run)? {
                None => println!(
                    "manifest written to {}",
                    cfg.out_dir.join(commands::MANIFEST).display()
                ),
                Some(r) => {
                    for e in &r.outcome.trace.epochs {
                        let val = e.val.map_or(String::new(), |v| {
                            format!(", val mse {:.6} mae {:.6}", v.mse, v.mae)
                        });
                        println!("epoch {}: train loss {:.6}{val}", e.epoch, e.train_loss);
                    }
                    println!(
                        "validation (best epoch {}): mse {:.6} mae {:.6}",
                        r.outcome.best_epoch.unwrap_or(0),
                        r.val.mse,
                        r.val.mae
                    );
                    println!("artifacts in {}", r.dir.display());
                }
            }
        }
        Command::Evaluate {
            run,
            checkpoints,
            raw,
        } => {
            let cfg = run.resolve(RunConfig::default())?;
            let table = commands::cmd_evaluate(&cfg, &checkpoints, raw)?;
            print!("{}", table.render_text());
        }
        Command::Forecast {
            checkpoint,
            window,
            output,
        } => {
            let out = commands::cmd_forecast(&checkpoint, &window, &output)?;
            println!("{} forecast rows written to {}", out.len(), output.display());
        }
        Command::Gradcheck {
            run,
            channels,
            eps,
            tol,
            corrupt_grad,
        } => {
            let cfg = run.resolve(RunConfig::tiny())?;
            let report = commands::cmd_gradcheck(&cfg, channels, eps, tol, corrupt_grad)?;
            let width = report.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
            for p in &report.params {
                let flag = if p.max_rel_error <= tol { "ok" } else { "FAIL" };
                println!(
                    "{:<width$}  {:>6}  {:.3e}  {flag}",
                    p.name, p.numel, p.max_rel_error
                );
            }
            println!("max relative error {:.3e} (tol {tol:e})", report.max_rel_error());
            if !report.passed() {
                let names: Vec<&str> = report.offenders().map(|p| p.name.as_str()).collect();
                return Err(CliError::GradCheck(format!(
                    "over tolerance: {}",
                    names.join(", ")
                )));
            }
        }
        Command::Synth {
            spec,
            channels,
            length,
            seed,
            output,
        } => {
            let mut s = parse_synth_spec(spec.as_deref().unwrap_or("default"))?;
            s.channels = channels.unwrap_or(s.channels);
            s.length = length.unwrap_or(s.length);
            s.seed = seed.unwrap_or(s.seed);
            let table = commands::cmd_synth(&s, &output)?;
            println!(
                "{} rows x {} channels written to {}",
                table.len(),
                table.channels(),
                output.display()
            );
        }
        Command::Sweep { run, grid } => {
            let cfg = run.resolve(RunConfig::default())?;
            let table = commands::cmd_sweep(&cfg, grid)?;
            print!("{}", table.render_text());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported as one line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
