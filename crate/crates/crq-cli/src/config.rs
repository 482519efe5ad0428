use clap::ValueEnum;
use crq::exec::ExecMode;
use crq::homotopy::RESIDUAL_LADDER;
use serde::Serialize;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckGeometry,
    AuditBarrier,
    AuditKernels,
    RunHomotopy,
    IndexAudit,
    EstimateNorms,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckGeometry => "check-geometry",
            Command::AuditBarrier => "audit-barrier",
            Command::AuditKernels => "audit-kernels",
            Command::RunHomotopy => "run-homotopy",
            Command::IndexAudit => "index-audit",
            Command::EstimateNorms => "estimate-norms",
        }
    }
}

/// Pass thresholds; each can be overridden with a `--tol-*` flag.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub normalization: f64,
    pub determinant: f64,
    pub closedness_order: f64,
    pub vanishing: f64,
    pub baseline_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { normalization: 1e-10, determinant: 1e-12, closedness_order: 1.7, vanishing: 1e-10, baseline_factor: 2.0 }
    }
}

/// Everything a command needs. The serialized form is what reports hash, so
/// it leaves out the output directory and the execution mode, neither of
/// which changes any number.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: String,
    pub epsilons: Vec<f64>,
    pub budgets: Vec<usize>,
    pub seed: u64,
    pub samples: usize,
    pub corroborate: bool,
    pub tolerances: Tolerances,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub exec: ExecMode,
}

/// Invalid flag combination; reported with exit status 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    /// Fills per-command defaults for the ladder and checks its invariants.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        let (eps, budgets): (Vec<f64>, Vec<usize>) = match self.command {
            Command::RunHomotopy => RESIDUAL_LADDER.iter().copied().unzip(),
            Command::EstimateNorms => (vec![0.05], vec![10_000]),
            Command::IndexAudit if self.corroborate => (Vec::new(), vec![100_000]),
            _ => (Vec::new(), Vec::new()),
        };
        if self.epsilons.is_empty() {
            self.epsilons = eps;
        }
        if self.budgets.is_empty() {
            self.budgets = budgets;
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(ConfigError(format!("epsilon {e} must be positive")));
        }
        if !self.epsilons.windows(2).all(|w| w[1] < w[0]) {
            return Err(ConfigError("the epsilon ladder must be strictly decreasing".into()));
        }
        if !self.budgets.windows(2).all(|w| w[1] > w[0]) {
            return Err(ConfigError("node budgets must be strictly increasing".into()));
        }
        let paired = matches!(self.command, Command::RunHomotopy | Command::EstimateNorms);
        if paired && self.epsilons.len() != self.budgets.len() {
            return Err(ConfigError(format!(
                "{} needs one budget per epsilon, got {} and {}",
                self.command.name(),
                self.epsilons.len(),
                self.budgets.len()
            )));
        }
        if paired && self.epsilons.is_empty() {
            return Err(ConfigError("the ladder is empty".into()));
        }
        if self.samples == 0 {
            return Err(ConfigError("--samples must be positive".into()));
        }
        Ok(self)
    }

    /// The `(epsilon, budget)` pairs of the ladder.
    pub fn ladder(&self) -> Vec<(f64, usize)> {
        self.epsilons.iter().copied().zip(self.budgets.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(command: Command, eps: Vec<f64>, budgets: Vec<usize>) -> RunConfig {
        RunConfig {
            command,
            model: "sig22_n5".into(),
            epsilons: eps,
            budgets,
            seed: 1,
            samples: 10,
            corroborate: false,
            tolerances: Tolerances::default(),
            out: PathBuf::from("out"),
            exec: ExecMode::Sequential,
        }
    }

    #[test]
    fn homotopy_defaults_to_the_full_ladder() {
        let c = config(Command::RunHomotopy, vec![], vec![]).resolve().unwrap();
        assert_eq!(c.ladder(), RESIDUAL_LADDER.to_vec());
    }

    #[test]
    fn ladder_order_is_enforced() {
        assert!(config(Command::RunHomotopy, vec![0.05, 0.1], vec![10_000, 100_000]).resolve().is_err());
        assert!(config(Command::RunHomotopy, vec![0.1, 0.05], vec![100_000, 10_000]).resolve().is_err());
        assert!(config(Command::RunHomotopy, vec![0.1, 0.05], vec![10_000]).resolve().is_err());
        assert!(config(Command::RunHomotopy, vec![0.1], vec![10_000]).resolve().is_ok());
    }
}
