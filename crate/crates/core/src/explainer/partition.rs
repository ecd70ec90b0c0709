use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::explainer::expand_regions;
use crate::explainer::{BaselineScores, Explanation, Masker, ScoreFn};
use crate::model::ImpactxModel;
use crate::numerics::Tensor;

pub const DEFAULT_BUDGET: usize = 2000;

/// Items refined per batched score call.
const ITEMS_PER_BATCH: usize = 32;

/// A node awaiting refinement inside one coalition context. `off` is the
/// context (regions outside the node that are present); `f_off`/`f_on` are
/// the scores without and with the node added to it.
struct Item {
    node: usize,
    context: Vec<bool>,
    f_off: f64,
    f_on: f64,
    weight: f64,
    priority: f64,
    seq: u64,
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Item {}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Item {
    // Max-heap on priority; earlier creation wins ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Owen-value attribution over the masker's partition tree.
///
/// Each refined node adds its left and right halves to its context, giving
/// four scores `f00, f10, f01, f11`. The left half then inherits the two
/// marginal contributions `f10 - f00` (right absent) and `f11 - f01`
/// (right present) at half weight each, and symmetrically for the right
/// half. Nodes are refined in order of `|f_on - f_off| * weight`. Once the
/// budget cannot pay for another node, every pending node's value is spread
/// uniformly over its pixels. The total always equals `f(x) - f(masked)`.
pub fn partition_shap(
    score: &dyn ScoreFn,
    x: &Tensor,
    class: usize,
    masker: &Masker,
    budget: usize,
    sample_id: u32,
) -> Result<Explanation> {
    masker.check_image(x)?;
    let tree = masker.tree();
    let grid = masker.grid();
    let n = grid.len();
    if budget < 2 * tree.leaf_count() {
        return Err(Error::Config(format!(
            "budget {budget} below minimum {} for {n} regions",
            2 * tree.leaf_count()
        )));
    }

    let ends = masker.evaluate(score, x, class, &[vec![false; n], vec![true; n]])?;
    let mut used = 2;
    let mut values = vec![0f64; n];
    let mut seq = 0u64;
    let mut heap = BinaryHeap::new();

    let mut settle = |node: usize,
                      context: Vec<bool>,
                      f_off: f64,
                      f_on: f64,
                      weight: f64,
                      heap: &mut BinaryHeap<Item>,
                      values: &mut [f64]| {
        if tree.node(node).is_leaf() {
            values[tree.regions(node)[0]] += weight * (f_on - f_off);
        } else {
            seq += 1;
            heap.push(Item {
                node,
                context,
                f_off,
                f_on,
                weight,
                priority: (f_on - f_off).abs() * weight,
                seq,
            });
        }
    };
    settle(
        tree.root(),
        vec![false; n],
        ends[0],
        ends[1],
        1.0,
        &mut heap,
        &mut values,
    );

    loop {
        let mut batch = Vec::new();
        while batch.len() < ITEMS_PER_BATCH && used + 2 * (batch.len() + 1) <= budget {
            match heap.pop() {
                Some(item) => batch.push(item),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let mut coalitions = Vec::with_capacity(2 * batch.len());
        for item in &batch {
            let (l, r) = tree.node(item.node).children.expect("internal node");
            for half in [l, r] {
                let mut m = item.context.clone();
                for region in tree.regions(half) {
                    m[region] = true;
                }
                coalitions.push(m);
            }
        }
        let f = masker.evaluate(score, x, class, &coalitions)?;
        used += coalitions.len();

        for (i, item) in batch.into_iter().enumerate() {
            let (l, r) = tree.node(item.node).children.expect("internal node");
            let (f10, f01) = (f[2 * i], f[2 * i + 1]);
            let (f00, f11) = (item.f_off, item.f_on);
            let half = item.weight / 2.0;
            let with_left = coalitions[2 * i].clone();
            let with_right = coalitions[2 * i + 1].clone();
            settle(
                l,
                item.context.clone(),
                f00,
                f10,
                half,
                &mut heap,
                &mut values,
            );
            settle(l, with_right, f01, f11, half, &mut heap, &mut values);
            settle(r, item.context, f00, f01, half, &mut heap, &mut values);
            settle(r, with_left, f10, f11, half, &mut heap, &mut values);
        }
    }

    // Budget exhausted: pending nodes spread their value by pixel share.
    let mut pending: Vec<Item> = heap.into_vec();
    pending.sort_by_key(|it| it.seq);
    for item in pending {
        let regions = tree.regions(item.node);
        let pixels: usize = regions.iter().map(|&r| grid.pixel_count(r)).sum();
        let total = item.weight * (item.f_on - item.f_off);
        for r in regions {
            values[r] += total * grid.pixel_count(r) as f64 / pixels as f64;
        }
    }

    Ok(Explanation {
        map: expand_regions(grid, &values, class, sample_id),
        regions: values,
        evaluations: used,
    })
}

/// Attribution of the baseline classifier's softmax score for the sample's
/// true label (never its predicted class).
pub fn true_class_attribution(
    model: &ImpactxModel,
    x: &Tensor,
    label: usize,
    sample_id: u32,
    masker: &Masker,
    budget: usize,
) -> Result<Explanation> {
    let classes = model.arch().classes();
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    partition_shap(&BaselineScores(model), x, label, masker, budget, sample_id)
}
