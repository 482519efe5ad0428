//! `crq`: batch driver for the audits.
//!
//! Exit status: 0 when every check passed, 1 when a check failed, 2 for bad
//! flags, unreadable models and missing prerequisites, 3 for runtime errors.

mod commands;
mod config;

use clap::Parser;
use config::{Command, ConfigError, RunConfig, Tolerances};
use crq::exec::ExecMode;
use crq::model::ModelError;
use crq::suite::DEFAULT_SEED;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "crq", version, about = "Audits for homotopy operators on quadric CR manifolds")]
struct Cli {
    /// Command to run.
    #[arg(value_enum, required_unless_present = "cmd", conflicts_with = "cmd")]
    command: Option<Command>,
    /// Same as the positional command.
    #[arg(long, value_enum)]
    cmd: Option<Command>,
    /// Bundled model name or path to a model file.
    #[arg(long, default_value = "sig22_n5")]
    model: String,
    /// Epsilon ladder, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Node budgets, strictly increasing, one per epsilon.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Random samples for the barrier and normalization audits.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Output directory for reports, tables and grid caches.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Adds the numeric kernel-decay check to `index-audit`.
    #[arg(long)]
    corroborate: bool,
    /// Run on one thread even when the parallel backend is compiled in.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    tol_normalization: Option<f64>,
    #[arg(long)]
    tol_determinant: Option<f64>,
    #[arg(long)]
    tol_closedness_order: Option<f64>,
    #[arg(long)]
    tol_vanishing: Option<f64>,
    #[arg(long)]
    tol_baseline_factor: Option<f64>,
}

impl Cli {
    fn into_config(self) -> Result<RunConfig, ConfigError> {
        let command = self.command.or(self.cmd).ok_or_else(|| ConfigError("no command given".into()))?;
        let d = Tolerances::default();
        let tolerances = Tolerances {
            normalization: self.tol_normalization.unwrap_or(d.normalization),
            determinant: self.tol_determinant.unwrap_or(d.determinant),
            closedness_order: self.tol_closedness_order.unwrap_or(d.closedness_order),
            vanishing: self.tol_vanishing.unwrap_or(d.vanishing),
            baseline_factor: self.tol_baseline_factor.unwrap_or(d.baseline_factor),
        };
        let exec = if self.sequential || !ExecMode::parallel_available() { ExecMode::Sequential } else { ExecMode::Parallel };
        RunConfig {
            command,
            model: self.model,
            epsilons: self.eps,
            budgets: self.budget,
            seed: self.seed,
            samples: self.samples,
            corroborate: self.corroborate,
            tolerances,
            out: self.out,
            exec,
        }
        .resolve()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match cli.into_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let model = match commands::load_model(&cfg.model) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: model `{}`: {e}", cfg.model);
            return ExitCode::from(2);
        }
    };
    match commands::run(&cfg, &model) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("report: {}", cfg.out.join(format!("{}.json", report.command)).display());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<ModelError>().is_some();
            ExitCode::from(if usage { 2 } else { 3 })
        }
    }
}
