//! Datasets, splits and the attribution cache.

mod cache;
mod cifar;
mod synthetic;

pub use cache::{AttributionCache, CacheEntry, CACHE_MAGIC, CACHE_VERSION};
pub use cifar::{load_cifar10_binary, read_cifar_batch, CIFAR10_CLASSES, CIFAR_RECORD_BYTES};
pub use synthetic::{generate_synthetic, SyntheticConfig, SYNTHETIC_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in [0, 1] with labels in [0, K) and stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<u32>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let ids = (0..labels.len() as u32).collect();
        Self::with_ids(images, labels, ids, classes, split)
    }

    pub fn with_ids(
        images: Tensor,
        labels: Vec<usize>,
        ids: Vec<u32>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() || ids.len() != labels.len() {
            return Err(Error::dim("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            ids,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    /// Sample `i` as `[c, h, w]`.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.row(i)
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<u32>)> {
        let x = self.images.gather_outer(rows)?;
        Ok((
            x,
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.ids[r]).collect(),
        ))
    }

    pub fn subset(&self, rows: &[usize], split: Split) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("dataset subset would be empty".into()));
        }
        let (images, labels, ids) = self.batch(rows)?;
        Self::with_ids(images, labels, ids, self.classes, split)
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows, self.split)
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sums = vec![0f64; c];
        for img in self.images.data().chunks_exact(c * plane) {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += img[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        let count = (self.len() * plane) as f64;
        sums.into_iter().map(|s| (s / count) as f32).collect()
    }

    /// Observed per-channel (min, max).
    pub fn channel_ranges(&self) -> Vec<(f32, f32)> {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut out = vec![(f32::INFINITY, f32::NEG_INFINITY); c];
        for img in self.images.data().chunks_exact(c * plane) {
            for (ch, r) in out.iter_mut().enumerate() {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Stratified, seed-deterministic split into (train, val). The validation
/// side receives `round(n * fraction)` samples, apportioned across classes
/// by largest remainder so each class is within one of its exact share.
pub fn split_train_val(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {fraction} not in (0, 1)"
        )));
    }
    let n = dataset.len();
    let total_val = (n as f64 * fraction).round() as usize;
    if total_val == 0 || total_val == n {
        return Err(Error::Config(format!(
            "validation fraction {fraction} leaves an empty split of {n} samples"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for rows in &mut by_class {
        rng.shuffle(rows);
    }
    let exact: Vec<f64> = by_class.iter().map(|r| r.len() as f64 * fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut remaining = total_val.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (rows, q) in by_class.iter().zip(quota) {
        val.extend_from_slice(&rows[..q]);
        train.extend_from_slice(&rows[q..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((
        dataset.subset(&train, Split::Train)?,
        dataset.subset(&val, Split::Val)?,
    ))
}

#[cfg(test)]
mod tests;
