//! Accuracy, MoRF perturbation curves and AOPC.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::explainer::{partition_shap, FusedScores, Masker, RegionGrid, ScoreFn};
use crate::model::ImpactxModel;
use crate::numerics::{Rng, Tensor};
use crate::trainer::csv_writer;

const SCORE_CHUNK: usize = 64;

/// Fraction of matching entries.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Top-1 accuracy of `predict` over `data`, evaluated in batches.
pub fn accuracy(
    mut predict: impl FnMut(&Tensor) -> Result<Vec<usize>>,
    data: &LabeledDataset,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(128) {
        let (x, _, _) = data.batch(chunk)?;
        predictions.extend(predict(&x)?);
    }
    accuracy_of(&predictions, data.labels())
}

/// Class score as regions are replaced by noise, most relevant first.
#[derive(Debug, Clone, PartialEq)]
pub struct MorfCurve {
    /// (fraction of regions perturbed, class score); starts at (0, unperturbed).
    pub points: Vec<(f64, f64)>,
    pub aopc: f64,
    pub sample_id: u32,
    pub class: usize,
}

/// Mean drop `score(0) - score(t)` over the steps `t >= 1`. Points whose
/// fraction does not exceed the previous one are ignored.
pub fn aopc(points: &[(f64, f64)]) -> Result<f64> {
    let mut kept: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &p in points {
        if kept.last().is_none_or(|last| p.0 > last.0) {
            kept.push(p);
        }
    }
    if kept.len() < 2 {
        return Err(Error::Data(
            "a perturbation curve needs at least two points".into(),
        ));
    }
    let s0 = kept[0].1;
    Ok(kept[1..].iter().map(|&(_, s)| s0 - s).sum::<f64>() / (kept.len() - 1) as f64)
}

/// Regions by descending mean map value, lower index first on ties.
pub fn region_ranking(grid: &RegionGrid, map: &Tensor) -> Result<Vec<usize>> {
    if map.len() != grid.height * grid.width {
        return Err(Error::Compatibility(format!(
            "map of shape {:?} does not fit a {}x{} grid",
            map.shape(),
            grid.height,
            grid.width
        )));
    }
    if !map.all_finite() {
        return Err(Error::Numeric(
            "attribution map has non-finite values".into(),
        ));
    }
    let means = grid.region_means(map.data());
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    Ok(order)
}

/// One image of uniform noise, each channel over its own `(lo, hi)` range.
pub fn noise_image(shape: [usize; 3], ranges: &[(f32, f32)], rng: &mut Rng) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    if ranges.len() != c {
        return Err(Error::Compatibility(format!(
            "{} noise ranges for {c} channels",
            ranges.len()
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for &(lo, hi) in ranges {
        for _ in 0..h * w {
            out.push(rng.uniform_range(lo as f64, hi as f64) as f32);
        }
    }
    Ok(out)
}

/// Perturbation curve for a fixed region order and noise image.
#[allow(clippy::too_many_arguments)]
pub fn morf_curve_ordered(
    score: &dyn ScoreFn,
    x: &Tensor,
    order: &[usize],
    class: usize,
    grid: &RegionGrid,
    step_regions: usize,
    noise: &[f32],
    sample_id: u32,
) -> Result<MorfCurve> {
    let plane = grid.height * grid.width;
    if x.len() % plane != 0 || x.len() != noise.len() || x.len() / plane == 0 {
        return Err(Error::Compatibility(format!(
            "image of shape {:?} does not fit a {}x{} grid",
            x.shape(),
            grid.height,
            grid.width
        )));
    }
    let mut seen = vec![false; grid.len()];
    if order.len() != grid.len()
        || order
            .iter()
            .any(|&r| r >= grid.len() || std::mem::replace(&mut seen[r], true))
    {
        return Err(Error::Config(
            "region order is not a permutation of the grid".into(),
        ));
    }
    if step_regions == 0 {
        return Err(Error::Config("step must cover at least one region".into()));
    }
    let channels = x.len() / plane;
    let mut current = x.data().to_vec();
    let mut images = current.clone();
    let mut fractions = vec![0.0];
    for (t, step) in order.chunks(step_regions).enumerate() {
        for &region in step {
            for p in grid.pixels(region) {
                for ch in 0..channels {
                    current[ch * plane + p] = noise[ch * plane + p];
                }
            }
        }
        images.extend_from_slice(&current);
        fractions.push(((t * step_regions + step.len()) as f64 / grid.len() as f64).min(1.0));
    }
    let mut shape = vec![fractions.len()];
    shape.extend_from_slice(if x.rank() == 4 {
        &x.shape()[1..]
    } else {
        x.shape()
    });
    let batch = Tensor::new(shape, images)?;
    let mut scores = Vec::with_capacity(fractions.len());
    for start in (0..fractions.len()).step_by(SCORE_CHUNK) {
        let part = batch.slice_outer(start, SCORE_CHUNK.min(fractions.len() - start))?;
        let s = score.scores(&part)?;
        if class >= s.dim(1) {
            return Err(Error::Label {
                label: class,
                classes: s.dim(1),
            });
        }
        scores.extend(s.data().chunks_exact(s.dim(1)).map(|row| row[class] as f64));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(
            "score function returned a non-finite value".into(),
        ));
    }
    let points: Vec<(f64, f64)> = fractions.into_iter().zip(scores).collect();
    Ok(MorfCurve {
        aopc: aopc(&points)?,
        points,
        sample_id,
        class,
    })
}

/// Perturbation curve following the descending relevance of `map`, with a
/// single noise image drawn from `rng` before the first step.
#[allow(clippy::too_many_arguments)]
pub fn morf_curve(
    score: &dyn ScoreFn,
    x: &Tensor,
    map: &Tensor,
    class: usize,
    grid: &RegionGrid,
    step_regions: usize,
    noise_ranges: &[(f32, f32)],
    rng: &mut Rng,
    sample_id: u32,
) -> Result<MorfCurve> {
    let order = region_ranking(grid, map)?;
    let plane = grid.height * grid.width;
    let channels = x.len() / plane.max(1);
    let noise = noise_image([channels, grid.height, grid.width], noise_ranges, rng)?;
    morf_curve_ordered(
        score,
        x,
        &order,
        class,
        grid,
        step_regions,
        &noise,
        sample_id,
    )
}

/// Where a region ranking comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// The model's own decoder output.
    Decoder,
    /// Partition attribution of the fused classifier.
    ExternalShap,
    /// A uniformly random region order.
    Random,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapSource::Decoder => "decoder",
            MapSource::ExternalShap => "external_shap",
            MapSource::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorfConfig {
    pub step_regions: usize,
    /// Noise images (and random orders) per sample; seeds `seed..seed + n`.
    pub noise_seeds: usize,
    pub seed: u64,
    /// Score evaluations for each external attribution map.
    pub shap_budget: usize,
    /// Worker threads across samples; 0 uses all cores.
    pub workers: usize,
}

impl Default for MorfConfig {
    fn default() -> Self {
        Self {
            step_regions: 1,
            noise_seeds: 5,
            seed: 0,
            shap_budget: 512,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSummary {
    pub source: MapSource,
    pub mean_aopc: f64,
    /// Sample standard deviation over all curves of the source.
    pub std_aopc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// One row per requested source, in request order.
    pub summary: Vec<SourceSummary>,
    /// Per source and sample, the curve averaged over noise seeds.
    pub curves: Vec<(MapSource, MorfCurve)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn average_curves(curves: &[MorfCurve]) -> Result<MorfCurve> {
    let k = curves.len() as f64;
    let points: Vec<(f64, f64)> = (0..curves[0].points.len())
        .map(|i| {
            (
                curves[0].points[i].0,
                curves.iter().map(|c| c.points[i].1).sum::<f64>() / k,
            )
        })
        .collect();
    Ok(MorfCurve {
        aopc: aopc(&points)?,
        points,
        sample_id: curves[0].sample_id,
        class: curves[0].class,
    })
}

/// Per-sample curves of every source: (source, one curve per noise seed).
type SampleCurves = Vec<(MapSource, Vec<MorfCurve>)>;

fn sample_curves(
    model: &ImpactxModel,
    data: &LabeledDataset,
    row: usize,
    sources: &[MapSource],
    masker: &Masker,
    noise_ranges: &[(f32, f32)],
    config: &MorfConfig,
) -> Result<SampleCurves> {
    let grid = masker.grid();
    let x = data.image(row);
    let id = data.ids()[row];
    let batch = x
        .clone()
        .reshape([1].iter().chain(x.shape()).copied().collect::<Vec<_>>())?;
    let prediction = model.predict_impactx(&batch)?;
    let class = prediction.classes[0];
    let fused = FusedScores(model);
    let mut out = Vec::with_capacity(sources.len());
    for &source in sources {
        let fixed = match source {
            MapSource::Decoder => Some(region_ranking(grid, &prediction.maps.row(0))?),
            MapSource::ExternalShap => {
                let e = partition_shap(&fused, &x, class, masker, config.shap_budget, id)?;
                Some(region_ranking(grid, &e.map.values)?)
            }
            MapSource::Random => None,
        };
        let mut curves = Vec::with_capacity(config.noise_seeds);
        for s in 0..config.noise_seeds as u64 {
            let root = Rng::new(config.seed.wrapping_add(s));
            let noise = noise_image(
                masker.image_shape(),
                noise_ranges,
                &mut root.fork(2 * id as u64),
            )?;
            let order = match &fixed {
                Some(o) => o.clone(),
                None => root.fork(2 * id as u64 + 1).permutation(grid.len()),
            };
            curves.push(morf_curve_ordered(
                &fused,
                &x,
                &order,
                class,
                grid,
                config.step_regions,
                &noise,
                id,
            )?);
        }
        out.push((source, curves));
    }
    Ok(out)
}

/// MoRF comparison of attribution sources on the fused classifier, scoring
/// each sample's predicted class. Every source of a sample shares the same
/// noise images, so sources differ only in region order.
pub fn compare_maps(
    model: &ImpactxModel,
    data: &LabeledDataset,
    sources: &[MapSource],
    masker: &Masker,
    noise_ranges: &[(f32, f32)],
    config: &MorfConfig,
) -> Result<Comparison> {
    if sources.is_empty() || config.noise_seeds == 0 {
        return Err(Error::Config(
            "comparison needs at least one source and one noise seed".into(),
        ));
    }
    if masker.image_shape() != data.image_shape() {
        return Err(Error::Compatibility(
            "masker and dataset image shapes differ".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?;
    let per_sample: Vec<Result<SampleCurves>> = pool.install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|row| sample_curves(model, data, row, sources, masker, noise_ranges, config))
            .collect()
    });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::with_capacity(sources.len());
    let mut curves = Vec::with_capacity(sources.len() * data.len());
    for (i, &source) in sources.iter().enumerate() {
        let mut values = Vec::new();
        for sample in &per_sample {
            let seeds = &sample[i].1;
            values.extend(seeds.iter().map(|c| c.aopc));
            curves.push((source, average_curves(seeds)?));
        }
        let (mean_aopc, std_aopc) = mean_std(&values);
        summary.push(SourceSummary {
            source,
            mean_aopc,
            std_aopc,
            n: values.len(),
        });
    }
    Ok(Comparison { summary, curves })
}

/// `source,sample_id,class,step,fraction,score`.
pub fn write_morf_csv(path: &Path, comparison: &Comparison, meta: &[(&str, String)]) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record(["source", "sample_id", "class", "step", "fraction", "score"])?;
    for (source, curve) in &comparison.curves {
        for (step, (fraction, score)) in curve.points.iter().enumerate() {
            w.write_record([
                source.to_string(),
                curve.sample_id.to_string(),
                curve.class.to_string(),
                step.to_string(),
                fraction.to_string(),
                score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `source,mean_aopc,std_aopc,n`.
pub fn write_aopc_summary_csv(
    path: &Path,
    comparison: &Comparison,
    meta: &[(&str, String)],
) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record(["source", "mean_aopc", "std_aopc", "n"])?;
    for s in &comparison.summary {
        w.write_record([
            s.source.to_string(),
            s.mean_aopc.to_string(),
            s.std_aopc.to_string(),
            s.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
