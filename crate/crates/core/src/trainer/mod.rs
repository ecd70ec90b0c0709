//! Combined loss, the two training stages, the single-stage variant,
//! attribution-cache generation and grid search.

mod cache_gen;
mod grid;
mod stages;

pub use cache_gen::{generate_attribution_cache, normalized_targets, CacheRun, CacheStats};
pub use grid::{grid_search, write_grid_csv, GridResult, GridRow, GridSpace};
pub use stages::{single_stage_train, stage1_train, stage2_train, SingleStageConfig};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImpactxModel;
use crate::numerics::{kernels, OptimizerKind, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record wall time per epoch. Off by default so that reports are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            lambda: 1.0,
            stage1_epochs: 20,
            stage2_epochs: 20,
            patience: 5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} not in (0, 1)",
                self.validation_fraction
            )));
        }
        check_lambda(self.lambda)?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be a non-negative number, got {lambda}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
    Single,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Single => "single",
        })
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub mse: f64,
    /// The optimized scalar, `ce + lambda * mse`.
    pub combined: f64,
}

/// Per-epoch summary; training losses are sample-weighted means over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub phase: Phase,
    /// 1-based.
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub combined: f64,
    pub val_acc: f64,
    pub val_ce: f64,
    pub val_mse: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs: Vec<EpochReport>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Attribution maps regenerated during training (single-stage only).
    pub map_generations: usize,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog, _logits: &Tensor) {}
    fn on_epoch(&mut self, _report: &EpochReport, _model: &ImpactxModel) {}
}

impl TrainObserver for () {}

/// Tape nodes of the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub mse: Var,
    pub total: Var,
}

/// Records `CE(labels, logits) + lambda * MSE(target, predicted)`.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    labels: &[usize],
    predicted: Var,
    target: Var,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let mse = tape.mse(predicted, target)?;
    let weighted = tape.scale(mse, T::of(lambda));
    let total = tape.add(ce, weighted)?;
    Ok(LossVars { ce, mse, total })
}

/// Eager form of [`combined_loss`].
pub fn combined_loss_value<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    predicted: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let (ce, _) = kernels::cross_entropy(logits, labels)?;
    let mse = kernels::mse(predicted, target)?;
    Ok(ce.as_f64() + lambda * mse.as_f64())
}

/// Creates a CSV file that starts with a `# key=value ...` comment line
/// when `meta` is non-empty.
pub fn csv_writer(path: &Path, meta: &[(&str, String)]) -> Result<csv::Writer<std::fs::File>> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_empty() {
        let line: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(file, "# {}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

/// `stage,epoch,ce,mse,combined,val_acc,seconds`; `seconds` is empty when
/// timing is off.
pub fn write_metrics_csv(
    path: &Path,
    reports: &[EpochReport],
    meta: &[(&str, String)],
) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record([
        "stage", "epoch", "ce", "mse", "combined", "val_acc", "seconds",
    ])?;
    for r in reports {
        w.write_record([
            r.phase.to_string(),
            r.epoch.to_string(),
            r.ce.to_string(),
            r.mse.to_string(),
            r.combined.to_string(),
            r.val_acc.to_string(),
            r.seconds.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
