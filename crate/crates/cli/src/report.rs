//! Summary of a finished run directory.

use std::fmt;
use std::fs;
use std::path::Path;

use impactx_core::{Error, Result};

use crate::pipeline::{ACCURACY, AOPC_SUMMARY, GRID, METRICS, MORF};

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub config_hash: String,
    pub baseline_accuracy: f64,
    pub impactx_accuracy: f64,
    /// (source, mean AOPC) in file order.
    pub aopc: Vec<(String, f64)>,
}

impl Summary {
    pub fn delta(&self) -> f64 {
        self.impactx_accuracy - self.baseline_accuracy
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config hash:       {}", self.config_hash)?;
        writeln!(f, "baseline accuracy: {}", self.baseline_accuracy)?;
        writeln!(f, "impactx accuracy:  {}", self.impactx_accuracy)?;
        writeln!(f, "delta:             {}", self.delta())?;
        for (source, mean) in &self.aopc {
            writeln!(f, "mean AOPC {source}: {mean}")?;
        }
        Ok(())
    }
}

/// Reads a CSV artifact: its `config_hash` comment and its data rows.
fn read_artifact(path: &Path) -> Result<(Option<String>, Vec<csv::StringRecord>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("missing {}: {e}", path.display())))?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .and_then(|l| {
            l.split(' ')
                .find_map(|kv| kv.strip_prefix("config_hash="))
                .map(str::to_string)
        });
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((hash, rows))
}

fn number(row: &csv::StringRecord, i: usize, path: &Path) -> Result<f64> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: malformed row {row:?}", path.display())))
}

/// Collects the summary; fails if an artifact is missing or the artifacts
/// come from different configurations.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut hashes = Vec::new();
    let mut load = |name: &str| -> Result<Vec<csv::StringRecord>> {
        let (hash, rows) = read_artifact(&dir.join(name))?;
        hashes.push((name.to_string(), hash));
        Ok(rows)
    };
    let accuracy = load(ACCURACY)?;
    let aopc_rows = load(AOPC_SUMMARY)?;
    load(MORF)?;
    load(METRICS)?;
    if dir.join(GRID).exists() {
        load(GRID)?;
    }
    let first = hashes[0].1.clone();
    if let Some((name, h)) = hashes.iter().find(|(_, h)| *h != first || h.is_none()) {
        return Err(Error::Data(format!(
            "{name} carries config hash {h:?}, {ACCURACY} carries {first:?}; refusing a mixed directory"
        )));
    }
    let acc_path = dir.join(ACCURACY);
    let find = |model: &str| -> Result<f64> {
        let row = accuracy
            .iter()
            .find(|r| r.get(0) == Some(model))
            .ok_or_else(|| Error::Data(format!("{} has no {model} row", acc_path.display())))?;
        number(row, 1, &acc_path)
    };
    let aopc_path = dir.join(AOPC_SUMMARY);
    let aopc = aopc_rows
        .iter()
        .map(|r| {
            Ok((
                r.get(0).unwrap_or_default().to_string(),
                number(r, 1, &aopc_path)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Summary {
        config_hash: first.unwrap_or_default(),
        baseline_accuracy: find("baseline")?,
        impactx_accuracy: find("impactx")?,
        aopc,
    })
}
