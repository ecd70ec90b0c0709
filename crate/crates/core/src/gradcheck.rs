//! Central finite-difference checking of tape gradients.
//!
//! The loss closure is replayed forward-only on perturbed copies of the
//! parameter store, so the numeric estimate never touches a backward rule.
//! Run it on `f64` stores to keep the estimate trustworthy.

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients for every trainable parameter.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    loss: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.id())
        .collect();
    for id in ids {
        let zeros = Tensor::zeros(store.value(id).shape().to_vec());
        let grad = analytic.get(id).unwrap_or(&zeros);
        for index in 0..store.value(id).len() {
            let orig = store.value(id).data()[index];
            probe.value_mut(id).data_mut()[index] = orig + config.step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[index] = orig - config.step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[index];
            let rel = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some(GradMismatch {
                    param: id,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
