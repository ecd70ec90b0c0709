use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttributionCache, CacheEntry, LabeledDataset};
use crate::error::{Error, Result};
use crate::explainer::{true_class_attribution, AttributionMap, Masker, DEFAULT_BUDGET};
use crate::model::{ImpactxModel, TrainingStage};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheRun {
    /// Score evaluations per map.
    pub budget: usize,
    /// Explainer threads; 0 uses all cores.
    pub workers: usize,
    /// Samples per progress callback.
    pub chunk: usize,
}

impl Default for CacheRun {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            workers: 0,
            chunk: 64,
        }
    }
}

/// Outcome of a cache fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub generated: usize,
    pub skipped: usize,
    pub evaluations: usize,
}

/// Computes the true-class attribution map of every training sample not yet
/// in `cache`, using the baseline classifier. `on_chunk` sees the cache after
/// each completed chunk so callers can persist progress.
pub fn generate_attribution_cache(
    model: &ImpactxModel,
    train: &LabeledDataset,
    masker: &Masker,
    run: &CacheRun,
    cache: &mut AttributionCache,
    on_chunk: &mut dyn FnMut(&AttributionCache) -> Result<()>,
) -> Result<CacheStats> {
    if model.stage() == TrainingStage::Untrained {
        return Err(Error::State(
            "attribution maps need a trained backbone".into(),
        ));
    }
    fill_cache(model, train, masker, run, cache, false, on_chunk)
}

pub(crate) fn fill_cache(
    model: &ImpactxModel,
    train: &LabeledDataset,
    masker: &Masker,
    run: &CacheRun,
    cache: &mut AttributionCache,
    overwrite: bool,
    on_chunk: &mut dyn FnMut(&AttributionCache) -> Result<()>,
) -> Result<CacheStats> {
    let shape = model.arch().input_shape();
    if masker.image_shape() != shape || train.image_shape() != shape {
        return Err(Error::Compatibility(format!(
            "masker {:?} / dataset {:?} / model {:?} image shapes differ",
            masker.image_shape(),
            train.image_shape(),
            shape
        )));
    }
    if (cache.height(), cache.width()) != (shape[1], shape[2]) {
        return Err(Error::Compatibility(format!(
            "cache holds {}x{} maps, model expects {}x{}",
            cache.height(),
            cache.width(),
            shape[1],
            shape[2]
        )));
    }
    let mut todo = Vec::new();
    let mut stats = CacheStats::default();
    for (row, (&id, &label)) in train.ids().iter().zip(train.labels()).enumerate() {
        match cache.get(id) {
            Some(e) if e.class as usize != label => {
                return Err(Error::Compatibility(format!(
                    "cached map for sample {id} has class {}, label is {label}",
                    e.class
                )))
            }
            Some(_) if !overwrite => stats.skipped += 1,
            _ => todo.push(row),
        }
    }
    if todo.is_empty() {
        return Ok(stats);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", run.workers)))?;
    for rows in todo.chunks(run.chunk.max(1)) {
        let results: Vec<_> = pool.install(|| {
            rows.par_iter()
                .map(|&row| {
                    let x = train.image(row);
                    let id = train.ids()[row];
                    true_class_attribution(model, &x, train.labels()[row], id, masker, run.budget)
                })
                .collect()
        });
        for explanation in results {
            let explanation = explanation?;
            stats.generated += 1;
            stats.evaluations += explanation.evaluations;
            let map = explanation.map;
            cache.insert(CacheEntry {
                sample_id: map.sample_id,
                class: map.class as u32,
                map: map.values.into_data(),
            })?;
        }
        on_chunk(cache)?;
    }
    Ok(stats)
}

/// Min-max normalized cached maps for every sample of `data`, in row order,
/// as `[n, 1, h, w]`.
pub fn normalized_targets(cache: &AttributionCache, data: &LabeledDataset) -> Result<Tensor> {
    let (h, w) = (cache.height(), cache.width());
    let mut out = Vec::with_capacity(data.len() * h * w);
    for &id in data.ids() {
        let entry = cache
            .get(id)
            .ok_or_else(|| Error::Data(format!("no cached attribution map for sample {id}")))?;
        let map = AttributionMap {
            values: Tensor::new(vec![1, h, w], entry.map.clone())?,
            class: entry.class as usize,
            sample_id: id,
        };
        out.extend_from_slice(map.min_max_normalized().data());
    }
    Tensor::new(vec![data.len(), 1, h, w], out)
}
