use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{csv_writer, TrainConfig};

/// Values tried for each searched field; the search covers their
/// Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub validation_fraction: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            batch_size: vec![32],
            learning_rate: vec![1e-3],
            validation_fraction: vec![0.2],
            lambda: vec![0.1, 1.0, 10.0],
        }
    }
}

impl GridSpace {
    /// A space holding only the values of `config`.
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            batch_size: vec![config.batch_size],
            learning_rate: vec![config.learning_rate],
            validation_fraction: vec![config.validation_fraction],
            lambda: vec![config.lambda],
        }
    }

    pub fn len(&self) -> usize {
        self.batch_size.len()
            * self.learning_rate.len()
            * self.validation_fraction.len()
            * self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every cell applied to `base`, `lambda` varying fastest.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &batch_size in &self.batch_size {
            for &learning_rate in &self.learning_rate {
                for &validation_fraction in &self.validation_fraction {
                    for &lambda in &self.lambda {
                        out.push(TrainConfig {
                            batch_size,
                            learning_rate,
                            validation_fraction,
                            lambda,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: TrainConfig,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows`; the earliest of equally good cells.
    pub best: usize,
}

impl GridResult {
    pub fn best_config(&self) -> &TrainConfig {
        &self.rows[self.best].config
    }
}

/// Runs `train` on every cell and keeps the highest validation accuracy.
pub fn grid_search(
    base: &TrainConfig,
    space: &GridSpace,
    mut train: impl FnMut(&TrainConfig) -> Result<f64>,
) -> Result<GridResult> {
    if space.is_empty() {
        return Err(Error::Config("grid search space is empty".into()));
    }
    let mut rows: Vec<GridRow> = Vec::with_capacity(space.len());
    let mut best = 0;
    for config in space.cells(base) {
        config.validate()?;
        let val_acc = train(&config)?;
        if val_acc.is_nan() {
            return Err(Error::Numeric("grid cell produced a NaN metric".into()));
        }
        if !rows.is_empty() && val_acc > rows[best].val_acc {
            best = rows.len();
        }
        rows.push(GridRow { config, val_acc });
    }
    Ok(GridResult { rows, best })
}

/// `batch_size,learning_rate,validation_fraction,lambda,val_acc`.
pub fn write_grid_csv(path: &Path, result: &GridResult, meta: &[(&str, String)]) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record([
        "batch_size",
        "learning_rate",
        "validation_fraction",
        "lambda",
        "val_acc",
    ])?;
    for row in &result.rows {
        let c = &row.config;
        w.write_record([
            c.batch_size.to_string(),
            c.learning_rate.to_string(),
            c.validation_fraction.to_string(),
            c.lambda.to_string(),
            row.val_acc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
