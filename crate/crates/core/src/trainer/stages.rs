use std::time::Instant;

use crate::data::{split_train_val, AttributionCache, LabeledDataset};
use crate::error::{Error, Result};
use crate::explainer::Masker;
use crate::model::{ImpactxModel, SubNet, TrainingStage};
use crate::numerics::{argmax, kernels, Gradients, Optimizer, Rng, Tape, Tensor};
use crate::trainer::cache_gen::{fill_cache, normalized_targets, CacheRun};
use crate::trainer::{
    combined_loss, EpochReport, Phase, StepLog, TrainConfig, TrainObserver, TrainReport,
};

const EVAL_CHUNK: usize = 128;

/// Options of the single-stage variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleStageConfig {
    pub epochs: usize,
    /// The cache is rebuilt from the current baseline branch after each of
    /// the first `regeneration_epochs` epochs.
    pub regeneration_epochs: usize,
    pub cache: CacheRun,
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    /// CE on the baseline scores only.
    Baseline,
    /// CE on the fused logits plus `lambda` times the map MSE, optionally
    /// with the baseline CE added to the classification term.
    Combined { with_baseline_ce: bool },
}

struct Targets {
    fit: Tensor,
    val: Tensor,
}

struct Run<'a> {
    phase: Phase,
    config: &'a TrainConfig,
    epochs: usize,
    objective: Objective,
    /// Sub-networks whose best-epoch weights are restored at the end.
    trained: &'a [SubNet],
    /// Sub-network that must stay bitwise identical throughout.
    frozen_guard: Option<SubNet>,
    stream: u64,
}

struct Losses {
    ce: f64,
    mse: f64,
    combined: f64,
}

fn check_compatible(model: &ImpactxModel, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.classes() != model.arch().classes() || data.image_shape() != model.arch().input_shape()
    {
        return Err(Error::Compatibility(format!(
            "dataset with {} classes of shape {:?} does not fit a model for {} classes of shape {:?}",
            data.classes(),
            data.image_shape(),
            model.arch().classes(),
            model.arch().input_shape()
        )));
    }
    Ok(())
}

fn split(data: &LabeledDataset, config: &TrainConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    split_train_val(data, config.validation_fraction, config.seed)
}

fn step(
    model: &ImpactxModel,
    objective: Objective,
    lambda: f64,
    x: Tensor,
    labels: &[usize],
    target: Option<Tensor>,
) -> Result<(Losses, Tensor, Gradients<f32>)> {
    let mut tape = Tape::new(model.store());
    let xv = tape.input(x);
    let (losses, logits, total) = match (objective, target) {
        (Objective::Baseline, _) => {
            let m = model.forward_m(&mut tape, xv)?;
            let ce = tape.cross_entropy(m, labels)?;
            let v = tape.value(ce).item() as f64;
            (
                Losses {
                    ce: v,
                    mse: 0.0,
                    combined: v,
                },
                m,
                ce,
            )
        }
        (Objective::Combined { with_baseline_ce }, Some(target)) => {
            let out = model.forward_all(&mut tape, xv)?;
            let tv = tape.input(target);
            let mut loss = combined_loss(&mut tape, out.logits, labels, out.map, tv, lambda)?;
            if with_baseline_ce {
                let ce_m = tape.cross_entropy(out.m, labels)?;
                loss.ce = tape.add(loss.ce, ce_m)?;
                loss.total = tape.add(loss.total, ce_m)?;
            }
            let value = |v| tape.value(v).item() as f64;
            let losses = Losses {
                ce: value(loss.ce),
                mse: value(loss.mse),
                combined: value(loss.total),
            };
            (losses, out.logits, loss.total)
        }
        (Objective::Combined { .. }, None) => unreachable!("combined objective without targets"),
    };
    if !losses.combined.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss became {}",
            losses.combined
        )));
    }
    let logits = tape.value(logits).clone();
    let grads = tape.backward(total)?;
    Ok((losses, logits, grads))
}

/// Validation accuracy, CE and map MSE.
fn evaluate(
    model: &ImpactxModel,
    objective: Objective,
    val: &LabeledDataset,
    targets: Option<&Tensor>,
) -> Result<(f64, f64, f64)> {
    let (mut correct, mut ce, mut mse) = (0usize, 0f64, 0f64);
    let rows: Vec<usize> = (0..val.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y, _) = val.batch(chunk)?;
        let probs = match objective {
            Objective::Baseline => model.baseline_probs(&x)?,
            Objective::Combined { .. } => {
                let (probs, maps) = model.impactx_outputs(&x)?;
                if let Some(t) = targets {
                    let t = t.gather_outer(chunk)?;
                    mse += kernels::mse(&maps, &t)? as f64 * chunk.len() as f64;
                }
                probs
            }
        };
        for (p, &label) in probs.data().chunks_exact(probs.dim(1)).zip(&y) {
            correct += (argmax(p) == label) as usize;
            ce -= (p[label].max(f32::MIN_POSITIVE) as f64).ln();
        }
    }
    let n = val.len() as f64;
    Ok((correct as f64 / n, ce / n, mse / n))
}

fn run_epochs(
    model: &mut ImpactxModel,
    run: &Run<'_>,
    fit: &LabeledDataset,
    val: &LabeledDataset,
    targets: &mut Option<Targets>,
    regenerate: &mut dyn FnMut(&ImpactxModel, usize) -> Result<Option<Targets>>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    let config = run.config;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut rng = Rng::new(config.seed).fork(run.stream);
    let guard = run.frozen_guard.map(|net| (net, model.snapshot(net)));
    let mut reports = Vec::new();
    let mut best: Option<(f64, f64, usize, Vec<Vec<Tensor>>)> = None;
    let mut stale = 0;
    let lambda = config.lambda;

    for epoch in 1..=run.epochs {
        let started = config.timing.then(Instant::now);
        let (mut ce, mut mse, mut combined) = (0f64, 0f64, 0f64);
        let order = rng.permutation(fit.len());
        for (i, rows) in order.chunks(config.batch_size).enumerate() {
            let (x, y, _) = fit.batch(rows)?;
            let target = match targets {
                Some(t) => Some(t.fit.gather_outer(rows)?),
                None => None,
            };
            let (losses, logits, grads) = step(model, run.objective, lambda, x, &y, target)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            optimizer.step(store);
            let w = rows.len() as f64;
            ce += losses.ce * w;
            mse += losses.mse * w;
            combined += losses.combined * w;
            let log = StepLog {
                phase: run.phase,
                epoch,
                step: i + 1,
                ce: losses.ce,
                mse: losses.mse,
                combined: losses.combined,
            };
            observer.on_step(&log, &logits);
        }
        if let Some((net, before)) = &guard {
            if model.snapshot(*net) != *before {
                return Err(Error::State(format!("{} changed while frozen", net.name())));
            }
        }
        let (val_acc, val_ce, val_mse) =
            evaluate(model, run.objective, val, targets.as_ref().map(|t| &t.val))?;
        let n = fit.len() as f64;
        let report = EpochReport {
            phase: run.phase,
            epoch,
            ce: ce / n,
            mse: mse / n,
            combined: combined / n,
            val_acc,
            val_ce,
            val_mse,
            seconds: started.map(|s| s.elapsed().as_secs_f64()),
        };
        observer.on_epoch(&report, model);

        let val_loss = val_ce + lambda * val_mse;
        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improved {
            let weights = run.trained.iter().map(|&net| model.snapshot(net)).collect();
            best = Some((val_acc, val_loss, epoch, weights));
            stale = 0;
        } else {
            stale += 1;
        }
        reports.push(report);
        if let Some(t) = regenerate(model, epoch)? {
            *targets = Some(t);
        }
        if stale >= config.patience {
            break;
        }
    }

    let (best_val_acc, best_epoch) = match best {
        Some((acc, _, epoch, weights)) => {
            for (&net, w) in run.trained.iter().zip(&weights) {
                model.restore(net, w)?;
            }
            (acc, epoch)
        }
        None => (0.0, 0),
    };
    Ok(TrainReport {
        phase: run.phase,
        epochs: reports,
        best_epoch,
        best_val_acc,
        map_generations: 0,
    })
}

fn no_regeneration(_: &ImpactxModel, _: usize) -> Result<Option<Targets>> {
    Ok(None)
}

/// Trains the feature extractor `M` with cross entropy alone and keeps the
/// best-validation-accuracy weights. Leaves `M` frozen.
pub fn stage1_train(
    model: &mut ImpactxModel,
    train: &LabeledDataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    check_compatible(model, train)?;
    let (fit, val) = split(train, config)?;
    model.train_only(&[SubNet::M]);
    let run = Run {
        phase: Phase::Stage1,
        config,
        epochs: config.stage1_epochs,
        objective: Objective::Baseline,
        trained: &[SubNet::M],
        frozen_guard: None,
        stream: 1,
    };
    let report = run_epochs(
        model,
        &run,
        &fit,
        &val,
        &mut None,
        &mut no_regeneration,
        observer,
    )?;
    model.set_frozen(SubNet::M, true);
    model.set_stage(TrainingStage::Backbone);
    Ok(report)
}

fn targets_for(
    cache: &AttributionCache,
    fit: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<Targets> {
    Ok(Targets {
        fit: normalized_targets(cache, fit)?,
        val: normalized_targets(cache, val)?,
    })
}

/// Trains `LEP`, `D` and `C` on the combined loss with `M` frozen, using
/// the cached maps (min-max normalized) as reconstruction targets.
pub fn stage2_train(
    model: &mut ImpactxModel,
    train: &LabeledDataset,
    cache: &AttributionCache,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    check_compatible(model, train)?;
    if !model.is_frozen(SubNet::M) {
        return Err(Error::State("stage 2 requires M to be frozen".into()));
    }
    if model.stage() == TrainingStage::Untrained {
        return Err(Error::State("stage 2 requires a trained backbone".into()));
    }
    let (fit, val) = split(train, config)?;
    let mut targets = Some(targets_for(cache, &fit, &val)?);
    let trained = [SubNet::Lep, SubNet::Decoder, SubNet::Classifier];
    model.train_only(&trained);
    let run = Run {
        phase: Phase::Stage2,
        config,
        epochs: config.stage2_epochs,
        objective: Objective::Combined {
            with_baseline_ce: false,
        },
        trained: &trained,
        frozen_guard: Some(SubNet::M),
        stream: 2,
    };
    let report = run_epochs(
        model,
        &run,
        &fit,
        &val,
        &mut targets,
        &mut no_regeneration,
        observer,
    )?;
    model.set_stage(TrainingStage::Complete);
    Ok(report)
}

/// Trains all four sub-networks together. The classification term adds the
/// baseline CE on `m` to the fused CE so that the baseline branch, which the
/// explainer reads, stays a classifier. Missing cache entries are first
/// generated from the current model.
pub fn single_stage_train(
    model: &mut ImpactxModel,
    train: &LabeledDataset,
    masker: &Masker,
    cache: &mut AttributionCache,
    config: &TrainConfig,
    single: &SingleStageConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    check_compatible(model, train)?;
    let (fit, val) = split(train, config)?;
    fill_cache(
        model,
        train,
        masker,
        &single.cache,
        cache,
        false,
        &mut |_| Ok(()),
    )?;
    let mut targets = Some(targets_for(cache, &fit, &val)?);
    model.train_only(&SubNet::ALL);
    let run = Run {
        phase: Phase::Single,
        config,
        epochs: single.epochs,
        objective: Objective::Combined {
            with_baseline_ce: true,
        },
        trained: &SubNet::ALL,
        frozen_guard: None,
        stream: 3,
    };
    let mut generations = 0;
    let mut regenerate = |m: &ImpactxModel, epoch: usize| -> Result<Option<Targets>> {
        if epoch > single.regeneration_epochs {
            return Ok(None);
        }
        let stats = fill_cache(
            m,
            train,
            masker,
            &single.cache,
            cache,
            true,
            &mut |_| Ok(()),
        )?;
        generations += stats.generated;
        Ok(Some(targets_for(cache, &fit, &val)?))
    };
    let mut report = run_epochs(
        model,
        &run,
        &fit,
        &val,
        &mut targets,
        &mut regenerate,
        observer,
    )?;
    report.map_generations = generations;
    model.set_frozen(SubNet::M, true);
    model.set_stage(TrainingStage::Complete);
    Ok(report)
}
