use std::fs;
use std::path::Path;

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One label byte followed by 3x32x32 channel-major pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: usize = 10;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses one binary batch file into labels and [0, 1] pixels.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if bytes.is_empty() || whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            reason: format!(
                "size {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD_BYTES) as u64,
                reason: format!("label byte {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((labels, pixels))
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let (l, p) = read_cifar_batch(&dir.join(f))?;
        labels.extend(l);
        pixels.extend(p);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, CIFAR10_CLASSES, split)
}

/// Loads the five training batches and the test batch of the standard
/// CIFAR-10 binary distribution from `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        load_files(dir, &TRAIN_FILES, Split::Train)?,
        load_files(dir, &[TEST_FILE], Split::Test)?,
    ))
}
