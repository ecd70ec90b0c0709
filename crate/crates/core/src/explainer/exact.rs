use crate::error::{Error, Result};
use crate::explainer::{expand_regions, Explanation, Masker, ScoreFn};
use crate::numerics::Tensor;

pub const MAX_EXACT_REGIONS: usize = 12;

/// Exact Shapley value of every region by full coalition enumeration:
/// `phi_i = sum_{S not containing i} |S|!(n-|S|-1)!/n! (f(S+i) - f(S))`.
pub fn exact_shapley(
    score: &dyn ScoreFn,
    x: &Tensor,
    class: usize,
    masker: &Masker,
    sample_id: u32,
) -> Result<Explanation> {
    masker.check_image(x)?;
    let n = masker.grid().len();
    if n > MAX_EXACT_REGIONS {
        return Err(Error::Size(format!(
            "exact Shapley over {n} regions (limit {MAX_EXACT_REGIONS})"
        )));
    }
    let coalitions: Vec<Vec<bool>> = (0..1usize << n)
        .map(|bits| (0..n).map(|i| bits >> i & 1 == 1).collect())
        .collect();
    let f = masker.evaluate(score, x, class, &coalitions)?;

    let mut fact = vec![1f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..n)
        .map(|s| fact[s] * fact[n - s - 1] / fact[n])
        .collect();

    let mut phi = vec![0f64; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for s in 0..1usize << n {
            if s & bit == 0 {
                *p += weight[s.count_ones() as usize] * (f[s | bit] - f[s]);
            }
        }
    }
    Ok(Explanation {
        map: expand_regions(masker.grid(), &phi, class, sample_id),
        regions: phi,
        evaluations: coalitions.len(),
    })
}
