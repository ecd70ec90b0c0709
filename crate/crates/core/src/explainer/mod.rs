//! Model-agnostic attribution over rectangular image regions.
//!
//! Regions are switched on (original pixels) or off (baseline fill) by a
//! [`Masker`]. [`partition_shap`] spends a fixed evaluation budget on a
//! hierarchical Owen-value recursion; [`exact_shapley`] enumerates every
//! coalition and serves as the reference for small grids.

mod exact;
mod grid;
mod partition;
mod tree;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

pub use exact::{exact_shapley, MAX_EXACT_REGIONS};
pub use grid::RegionGrid;
pub use partition::{partition_shap, true_class_attribution, DEFAULT_BUDGET};
pub use tree::{PartitionTree, TreeNode};

use crate::error::{Error, Result};
use crate::model::ImpactxModel;
use crate::numerics::Tensor;

/// Per-class scores for a batch of images `[n, c, h, w]`, returned `[n, K]`.
pub trait ScoreFn: Sync {
    fn scores(&self, batch: &Tensor) -> Result<Tensor>;
}

impl<F> ScoreFn for F
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        self(batch)
    }
}

/// Softmax scores of the baseline classifier `argmax(softmax(M(x)))`.
pub struct BaselineScores<'a>(pub &'a ImpactxModel);

impl ScoreFn for BaselineScores<'_> {
    fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        self.0.baseline_probs(batch)
    }
}

/// Softmax scores of the fused classifier.
pub struct FusedScores<'a>(pub &'a ImpactxModel);

impl ScoreFn for FusedScores<'_> {
    fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        self.0.impactx_probs(batch)
    }
}

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Images scored by the explainer on the current thread so far.
pub fn evaluations_on_thread() -> u64 {
    EVALUATIONS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Per-channel mean of the training images.
    DatasetMean,
    Constant {
        value: f32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskerConfig {
    pub baseline: BaselineKind,
    pub rows: usize,
    pub cols: usize,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineKind::DatasetMean,
            rows: 8,
            cols: 8,
        }
    }
}

/// Replaces absent regions with a per-channel fill value.
#[derive(Debug, Clone)]
pub struct Masker {
    grid: RegionGrid,
    channels: usize,
    fill: Vec<f32>,
    tree: PartitionTree,
}

impl Masker {
    /// `channel_means` is consulted only for [`BaselineKind::DatasetMean`].
    pub fn new(config: &MaskerConfig, channel_means: &[f32], shape: [usize; 3]) -> Result<Self> {
        let [channels, h, w] = shape;
        let grid = RegionGrid::new(config.rows, config.cols, h, w)?;
        let fill = match &config.baseline {
            BaselineKind::DatasetMean => {
                if channel_means.len() != channels {
                    return Err(Error::Config(format!(
                        "{} channel means for {channels} channels",
                        channel_means.len()
                    )));
                }
                channel_means.to_vec()
            }
            BaselineKind::Constant { value } => vec![*value; channels],
        };
        let tree = PartitionTree::build(config.rows, config.cols)?;
        Ok(Self {
            grid,
            channels,
            fill,
            tree,
        })
    }

    pub fn grid(&self) -> &RegionGrid {
        &self.grid
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.grid.height, self.grid.width]
    }

    /// Writes `x` with every region whose flag is false replaced by the fill.
    pub fn apply_into(&self, x: &[f32], present: &[bool], out: &mut Vec<f32>) {
        let plane = self.grid.height * self.grid.width;
        let start = out.len();
        out.extend_from_slice(x);
        for (r, _) in present.iter().enumerate().filter(|(_, &p)| !p) {
            for c in 0..self.channels {
                let dst = &mut out[start + c * plane..start + (c + 1) * plane];
                for i in self.grid.pixels(r) {
                    dst[i] = self.fill[c];
                }
            }
        }
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = self.image_shape();
        let ok = match x.rank() {
            3 => x.shape() == want,
            4 => x.dim(0) == 1 && x.shape()[1..] == want,
            _ => false,
        };
        if !ok {
            return Err(Error::dim("masker image", x.shape(), &want));
        }
        Ok(())
    }

    /// Class-`k` score of `x` under each coalition of present regions.
    pub(crate) fn evaluate(
        &self,
        score: &dyn ScoreFn,
        x: &Tensor,
        class: usize,
        coalitions: &[Vec<bool>],
    ) -> Result<Vec<f64>> {
        const CHUNK: usize = 64;
        let [c, h, w] = self.image_shape();
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * x.len());
            for present in chunk {
                self.apply_into(x.data(), present, &mut data);
            }
            let batch = Tensor::new(vec![chunk.len(), c, h, w], data)?;
            let s = score.scores(&batch)?;
            if s.rank() != 2 || s.dim(0) != chunk.len() || class >= s.dim(1) {
                return Err(Error::dim(
                    "score function output",
                    s.shape(),
                    &[chunk.len(), class + 1],
                ));
            }
            let k = s.dim(1);
            for row in s.data().chunks_exact(k) {
                let v = row[class] as f64;
                if !v.is_finite() {
                    return Err(Error::Numeric("score function".into()));
                }
                out.push(v);
            }
            EVALUATIONS.with(|e| e.set(e.get() + chunk.len() as u64));
        }
        Ok(out)
    }
}

/// Per-pixel signed relevance of one input for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `[1, h, w]`.
    pub values: Tensor,
    pub class: usize,
    pub sample_id: u32,
}

impl AttributionMap {
    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    /// Rescales to [0, 1]; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Tensor {
        let d = self.values.data();
        let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        if span > 0.0 && span.is_finite() {
            self.values.map(|v| (v - lo) / span)
        } else {
            self.values.map(|_| 0.0)
        }
    }
}

/// Result of an attribution run.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub map: AttributionMap,
    /// Attribution per region, row-major; sums to the map's total.
    pub regions: Vec<f64>,
    /// Score-function calls spent.
    pub evaluations: usize,
}

/// Spreads per-region values uniformly over their pixels.
pub(crate) fn expand_regions(
    grid: &RegionGrid,
    regions: &[f64],
    class: usize,
    sample_id: u32,
) -> AttributionMap {
    let mut data = vec![0f32; grid.height * grid.width];
    for (r, &v) in regions.iter().enumerate() {
        let per = v / grid.pixel_count(r) as f64;
        for i in grid.pixels(r) {
            data[i] = per as f32;
        }
    }
    AttributionMap {
        values: Tensor::new(vec![1, grid.height, grid.width], data).expect("map shape"),
        class,
        sample_id,
    }
}
