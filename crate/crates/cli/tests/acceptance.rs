//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use impactx_cli::config::ExperimentConfig;
use impactx_cli::pipeline::{self, Phase, AOPC_SUMMARY, CACHE, METRICS, MODEL_CHECKPOINT};
use impactx_core::data::{
    generate_synthetic, load_cifar10_binary, read_cifar_batch, AttributionCache, CacheEntry,
    LabeledDataset, SyntheticConfig, CIFAR_RECORD_BYTES,
};
use impactx_core::evaluation::{
    accuracy, morf_curve_ordered, noise_image, region_ranking, MorfCurve,
};
use impactx_core::explainer::{
    evaluations_on_thread, exact_shapley, partition_shap, BaselineKind, FusedScores, Masker,
    MaskerConfig, RegionGrid, ScoreFn,
};
use impactx_core::gradcheck::{check_gradients, GradCheckConfig};
use impactx_core::model::{forward_counts, Checkpoint, ImpactxArch, ImpactxModel, SubNet};
use impactx_core::numerics::{Activation, ParamStore, Tape};
use impactx_core::trainer::{
    combined_loss, stage1_train, stage2_train, EpochReport, StepLog, TrainConfig, TrainObserver,
};
use impactx_core::{Error, Rng, Tensor};

const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const EFFICIENCY_TOL: f64 = 1e-5;
const SYMMETRY_TOL: f64 = 1e-6;
const NULL_TOL: f64 = 1e-6;
const PARTITION_TOL: f64 = 1e-5;
const LOSS_SUM_TOL: f64 = 1e-6;
const SEEDS: u64 = 5;
const EVAL_SAMPLES: usize = 50;
const PROPERTY_LIMIT_SECS: f64 = 120.0;
const TRAINING_LIMIT_SECS: f64 = 1800.0;
const EVAL_LIMIT_SECS: f64 = 900.0;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Values spaced at least 0.02 apart and away from zero, so kinks of
/// ReLU and max-pooling stay out of reach of the finite differences.
fn separated(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 + 0.02 * i as f64).collect();
    rng.shuffle(&mut v);
    for x in &mut v {
        if rng.uniform() < 0.5 {
            *x = -*x;
        }
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn primitive_error(prim: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(3);
    let c = 1 + rng.below(3);
    let hw = 2 * (1 + rng.below(3));
    let mut s = ParamStore::<f64>::new();
    let cfg = GradCheckConfig::default();
    let report = match prim {
        0 => {
            let (i, o) = (1 + rng.below(5), 1 + rng.below(5));
            let (x, w, b) = (
                s.add("x", random(&[n, i], &mut rng)),
                s.add("w", random(&[i, o], &mut rng)),
                s.add("b", random(&[o], &mut rng)),
            );
            let t = random(&[n, o], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let (x, w, b) = (tp.param(x), tp.param(w), tp.param(b));
                    let y = tp.dense(x, w, b)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        1 => {
            let f = 1 + rng.below(3);
            let (x, k, b) = (
                s.add("x", random(&[n, c, hw, hw + 1], &mut rng)),
                s.add("k", random(&[f, c, 3, 3], &mut rng)),
                s.add("b", random(&[f], &mut rng)),
            );
            let t = random(&[n, f, hw, hw + 1], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let (x, k, b) = (tp.param(x), tp.param(k), tp.param(b));
                    let y = tp.conv2d(x, k, b)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        2 => {
            let x = s.add("x", separated(&[n, c, hw, hw], &mut rng));
            let t = random(&[n, c, hw / 2, hw / 2], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let x = tp.param(x);
                    let y = tp.maxpool2d(x)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        3 => {
            let x = s.add("x", random(&[n, c, hw, hw], &mut rng));
            let t = random(&[n, c, 2 * hw, 2 * hw], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let x = tp.param(x);
                    let y = tp.upsample2x(x)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        4 | 5 => {
            let kind = if prim == 4 {
                Activation::Relu
            } else {
                Activation::Sigmoid
            };
            let x = s.add("x", separated(&[n, hw], &mut rng));
            let t = random(&[n, hw], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let x = tp.param(x);
                    let y = tp.activation(x, kind);
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        6 => {
            let k = 1 + rng.below(6);
            let x = s.add("x", random(&[n, k], &mut rng));
            let t = random(&[n, k], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let x = tp.param(x);
                    let y = tp.softmax(x)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
        7 => {
            let k = 2 + rng.below(6);
            let x = s.add("x", random(&[n, k], &mut rng).map(|v| v * 3.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            check_gradients(
                &s,
                |tp| {
                    let x = tp.param(x);
                    tp.cross_entropy(x, &labels)
                },
                cfg,
            )
        }
        8 => {
            let (a, b) = (
                s.add("a", random(&[n, c, hw], &mut rng)),
                s.add("b", random(&[n, c, hw], &mut rng)),
            );
            check_gradients(
                &s,
                |tp| {
                    let (a, b) = (tp.param(a), tp.param(b));
                    tp.mse(a, b)
                },
                cfg,
            )
        }
        _ => {
            let (a, b) = (
                s.add("a", random(&[n, c], &mut rng)),
                s.add("b", random(&[n, hw], &mut rng)),
            );
            let t = random(&[n, c + hw], &mut rng);
            check_gradients(
                &s,
                |tp| {
                    let (a, b) = (tp.param(a), tp.param(b));
                    let y = tp.concat(a, b)?;
                    let t = tp.input(t.clone());
                    tp.mse(y, t)
                },
                cfg,
            )
        }
    }?;
    Ok(report.max_rel_error)
}

fn gradient_correctness() -> Check {
    let names = [
        "dense",
        "conv2d",
        "maxpool",
        "upsample",
        "relu",
        "sigmoid",
        "softmax",
        "cross_entropy",
        "mse",
        "concat",
    ];
    let mut worst_primitive = 0f64;
    for (p, name) in names.iter().enumerate() {
        for seed in 0..20 {
            let err = primitive_error(p, 7000 + seed).map_err(e2s)?;
            ensure(
                err < PRIMITIVE_TOL,
                format!("{name} seed {seed}: relative error {err:e}"),
            )?;
            worst_primitive = worst_primitive.max(err);
        }
    }

    let arch = ImpactxArch::tiny(3, 8, 2).map_err(e2s)?;
    let model = ImpactxModel::<f32>::new(arch, &mut Rng::new(11))
        .map_err(e2s)?
        .cast::<f64>();
    let params: usize = SubNet::ALL.iter().map(|&n| model.param_count(n)).sum();
    ensure(
        params <= 5000,
        format!("tiny model has {params} parameters"),
    )?;
    let (train, _) = generate_synthetic(&SyntheticConfig {
        image_size: 8,
        patch_size: 2,
        patch_positions: [(1, 1), (5, 5)],
        train_samples: 2,
        test_samples: 2,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .map_err(e2s)?;
    let (x, y, _) = train.batch(&[0, 1]).map_err(e2s)?;
    let x = x.cast::<f64>();
    let target = random(&[2, 1, 8, 8], &mut Rng::new(12)).map(|v| 0.5 + 0.5 * v);
    let cfg = GradCheckConfig {
        step: 1e-6,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(
        model.store(),
        |tp: &mut Tape<'_, f64>| {
            let xv = tp.input(x.clone());
            let out = model.forward_all(tp, xv)?;
            let tv = tp.input(target.clone());
            Ok(combined_loss(tp, out.logits, &y, out.map, tv, 0.7)?.total)
        },
        cfg,
    )
    .map_err(e2s)?;
    ensure(
        report.max_rel_error < END_TO_END_TOL,
        format!(
            "end-to-end relative error {:e} at {:?}",
            report.max_rel_error, report.worst
        ),
    )?;
    Ok(format!(
        "10 primitives x 20 shapes max rel err {worst_primitive:.1e} (< {PRIMITIVE_TOL:e}); combined loss on {params}-parameter model, {} gradients, max rel err {:.1e} (< {END_TO_END_TOL:e})",
        report.checked, report.max_rel_error
    ))
}

// ---------------------------------------------------------------- 2

/// Image whose region `r` holds 1 for a present player; a zero baseline
/// marks absent ones.
fn full_image(grid: &RegionGrid) -> Tensor {
    Tensor::full(vec![1, grid.height, grid.width], 1.0)
}

fn zero_masker(rows: usize, cols: usize) -> Masker {
    let cfg = MaskerConfig {
        baseline: BaselineKind::Constant { value: 0.0 },
        rows,
        cols,
    };
    Masker::new(&cfg, &[], [1, rows * 2, cols * 2]).unwrap()
}

/// Two-class score from a set function of the present regions.
fn game_score<'a>(
    grid: &'a RegionGrid,
    v: &'a (dyn Fn(&[bool]) -> f64 + Sync),
) -> impl ScoreFn + 'a {
    move |batch: &Tensor| -> impactx_core::Result<Tensor> {
        let n = batch.dim(0);
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let present: Vec<bool> = grid
                .region_means(batch.row(i).data())
                .iter()
                .map(|&m| m > 0.5)
                .collect();
            let s = v(&present);
            out.extend([s as f32, -s as f32]);
        }
        Tensor::new(vec![n, 2], out)
    }
}

fn shapley_axioms() -> Check {
    let (mut eff, mut sym, mut null) = (0f64, 0f64, 0f64);
    let games = 60;
    for seed in 0..games {
        let mut rng = Rng::new(9000 + seed);
        let regions = 3 + rng.below(8);
        let (rows, cols) = if regions.is_multiple_of(2) {
            (2, regions / 2)
        } else {
            (1, regions)
        };
        let masker = zero_masker(rows, cols);
        let grid = *masker.grid();
        let n = grid.len();
        let weights: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let pair: Vec<f64> = (0..n * n).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        let null_player = rng.below(n);
        let twin_a = (null_player + 1) % n;
        let twin_b = (null_player + 2) % n;
        let w = |i: usize| {
            if i == twin_b {
                weights[twin_a]
            } else {
                weights[i]
            }
        };
        let p = |i: usize, j: usize| {
            let (i, j) = (
                if i == twin_b { twin_a } else { i },
                if j == twin_b { twin_a } else { j },
            );
            if i == j {
                0.0
            } else {
                pair[i.min(j) * n + i.max(j)]
            }
        };
        let v = move |s: &[bool]| -> f64 {
            let live: Vec<usize> = (0..n).filter(|&i| s[i] && i != null_player).collect();
            let mut total: f64 = live.iter().map(|&i| w(i)).sum();
            for (k, &i) in live.iter().enumerate() {
                for &j in &live[k + 1..] {
                    if !((i == twin_a && j == twin_b) || (i == twin_b && j == twin_a)) {
                        total += p(i, j);
                    }
                }
            }
            total + 0.3 * (live.len() as f64).powi(2)
        };
        let score = game_score(&grid, &v);
        let x = full_image(&grid);
        let e = exact_shapley(&score, &x, 0, &masker, seed as u32).map_err(e2s)?;
        let phi = &e.regions;
        let f_full = v(&vec![true; n]) as f32 as f64;
        let f_empty = v(&vec![false; n]) as f32 as f64;
        eff = eff.max((phi.iter().sum::<f64>() - (f_full - f_empty)).abs());
        sym = sym.max((phi[twin_a] - phi[twin_b]).abs());
        null = null.max(phi[null_player].abs());
    }
    ensure(eff < EFFICIENCY_TOL, format!("efficiency gap {eff:e}"))?;
    ensure(sym < SYMMETRY_TOL, format!("symmetry gap {sym:e}"))?;
    ensure(null < NULL_TOL, format!("null-player value {null:e}"))?;

    let mut partition_gap = 0f64;
    for seed in 0..20 {
        let mut rng = Rng::new(9500 + seed);
        let (rows, cols) = (2, 2 + rng.below(3));
        let masker = zero_masker(rows, cols);
        let grid = *masker.grid();
        let weights: Vec<f64> = (0..grid.len())
            .map(|_| rng.uniform_range(-1.0, 1.0))
            .collect();
        let v = move |s: &[bool]| -> f64 {
            s.iter()
                .zip(&weights)
                .filter(|(p, _)| **p)
                .map(|(_, w)| w)
                .sum()
        };
        let score = game_score(&grid, &v);
        let x = full_image(&grid);
        let exact = exact_shapley(&score, &x, 0, &masker, 0).map_err(e2s)?;
        let budget = masker.tree().full_refinement_cost();
        let part = partition_shap(&score, &x, 0, &masker, budget, 0).map_err(e2s)?;
        for (a, b) in exact.regions.iter().zip(&part.regions) {
            partition_gap = partition_gap.max((a - b).abs());
        }
    }
    ensure(
        partition_gap < PARTITION_TOL,
        format!("partition vs exact gap {partition_gap:e}"),
    )?;
    Ok(format!(
        "{games} games of 3-10 regions: efficiency {eff:.1e} (< {EFFICIENCY_TOL:e}), symmetry {sym:.1e} (< {SYMMETRY_TOL:e}), null {null:.1e} (< {NULL_TOL:e}); partition vs exact on 20 additive games {partition_gap:.1e} (< {PARTITION_TOL:e})"
    ))
}

// ---------------------------------------------------------------- 3

#[derive(Default)]
struct Recorder {
    steps: Vec<StepLog>,
    logits: Vec<Tensor>,
    m_changed_at: Option<usize>,
    m_reference: Vec<Tensor>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, log: &StepLog, logits: &Tensor) {
        self.steps.push(log.clone());
        self.logits.push(logits.clone());
    }

    fn on_epoch(&mut self, report: &EpochReport, model: &ImpactxModel) {
        if self.m_changed_at.is_none() && model.snapshot(SubNet::M) != self.m_reference {
            self.m_changed_at = Some(report.epoch);
        }
    }
}

fn small_cache(data: &LabeledDataset, salt: f32) -> AttributionCache {
    let [_, h, w] = data.image_shape();
    let mut cache = AttributionCache::new(h, w);
    for (&id, &label) in data.ids().iter().zip(data.labels()) {
        let map = (0..h * w)
            .map(|i| ((i as f32 * 0.37 + salt) * (id as f32 + 1.0)).sin())
            .collect();
        cache
            .insert(CacheEntry {
                sample_id: id,
                class: label as u32,
                map,
            })
            .unwrap();
    }
    cache
}

fn training_invariants() -> Check {
    let (train, _) = generate_synthetic(&SyntheticConfig {
        image_size: 8,
        patch_size: 2,
        patch_positions: [(1, 1), (5, 5)],
        train_samples: 96,
        test_samples: 8,
        seed: 31,
        ..SyntheticConfig::default()
    })
    .map_err(e2s)?;
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        stage1_epochs: 4,
        stage2_epochs: 5,
        lambda: 2.0,
        seed: 31,
        ..TrainConfig::default()
    };
    let mut base = ImpactxModel::new(ImpactxArch::tiny(3, 8, 2).map_err(e2s)?, &mut Rng::new(31))
        .map_err(e2s)?;
    stage1_train(&mut base, &train, &config, &mut ()).map_err(e2s)?;

    let mut model = base.clone();
    let mut rec = Recorder {
        m_reference: base.snapshot(SubNet::M),
        ..Recorder::default()
    };
    let report = stage2_train(
        &mut model,
        &train,
        &small_cache(&train, 0.0),
        &config,
        &mut rec,
    )
    .map_err(e2s)?;
    ensure(
        rec.m_changed_at.is_none(),
        format!("M changed in epoch {:?}", rec.m_changed_at),
    )?;
    let gap = rec
        .steps
        .iter()
        .map(|s| (s.combined - (s.ce + config.lambda * s.mse)).abs())
        .fold(0.0, f64::max);
    ensure(
        gap < LOSS_SUM_TOL,
        format!("combined loss differs from its parts by {gap:e}"),
    )?;

    let zero = TrainConfig {
        lambda: 0.0,
        ..config.clone()
    };
    let run = |salt: f32| -> Result<Recorder, String> {
        let mut m = base.clone();
        let mut r = Recorder {
            m_reference: base.snapshot(SubNet::M),
            ..Recorder::default()
        };
        stage2_train(&mut m, &train, &small_cache(&train, salt), &zero, &mut r).map_err(e2s)?;
        Ok(r)
    };
    let (a, b) = (run(0.0)?, run(5.0)?);
    ensure(
        !a.logits.is_empty() && a.logits == b.logits,
        "lambda = 0 logits depend on the cache",
    )?;
    ensure(
        a.steps.iter().zip(&b.steps).any(|(x, y)| x.mse != y.mse),
        "the two caches did not differ",
    )?;
    Ok(format!(
        "M bitwise fixed over {} stage-2 epochs; max |combined - (ce + lambda mse)| {gap:.1e} over {} steps (< {LOSS_SUM_TOL:e}); lambda = 0 logits identical over {} steps for two caches",
        report.epochs.len(),
        rec.steps.len(),
        a.logits.len()
    ))
}

// ---------------------------------------------------------------- 4 and 5

struct SeedRun {
    seed: u64,
    train_secs: f64,
    eval_secs: f64,
    dir: PathBuf,
    baseline: f64,
    impactx: f64,
}

fn synthetic_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::load(&root().join("configs/synthetic.toml")).unwrap();
    config.eval.samples = EVAL_SAMPLES;
    config
}

fn seed_runs(work: &Path) -> Result<Vec<SeedRun>, String> {
    let mut runs = Vec::new();
    for seed in 0..SEEDS {
        let mut config = synthetic_config();
        config.set_seed(seed);
        let dir = work.join(format!("seed{seed}"));
        let start = Instant::now();
        pipeline::run(&config, &dir, &[Phase::Stage1, Phase::Cache, Phase::Stage2])
            .map_err(|e| e.to_string())?;
        let train_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        if seed == 0 {
            pipeline::run(&config, &dir, &[Phase::Eval]).map_err(|e| e.to_string())?;
        }
        let eval_secs = start.elapsed().as_secs_f64();
        let model = pipeline::load_model(&config, &dir.join(MODEL_CHECKPOINT)).map_err(e2s)?;
        let (_, test) = pipeline::load_data(&config).map_err(e2s)?;
        let baseline = accuracy(|x| model.predict_baseline(x), &test).map_err(e2s)?;
        let impactx = accuracy(|x| Ok(model.predict_impactx(x)?.classes), &test).map_err(e2s)?;
        runs.push(SeedRun {
            seed,
            train_secs,
            eval_secs,
            dir,
            baseline,
            impactx,
        });
    }
    Ok(runs)
}

fn fused_accuracy(runs: &[SeedRun]) -> Check {
    let n = runs.len() as f64;
    let base = runs.iter().map(|r| r.baseline).sum::<f64>() / n;
    let fused = runs.iter().map(|r| r.impactx).sum::<f64>() / n;
    let wins = runs.iter().filter(|r| r.impactx >= r.baseline).count();
    let secs: f64 = runs.iter().map(|r| r.train_secs).sum();
    ensure(
        secs < TRAINING_LIMIT_SECS,
        format!("training took {secs:.0}s"),
    )?;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{}: {:.4}/{:.4}", r.seed, r.baseline, r.impactx))
        .collect();
    let detail = format!(
        "mean baseline {base:.4}, mean IMPACTX {fused:.4}, IMPACTX >= baseline in {wins}/{} seeds [{}], training {secs:.0}s",
        runs.len(),
        per_seed.join(", ")
    );
    ensure(fused >= base && wins >= 3, detail.clone())?;
    Ok(detail)
}

fn explanation_quality(runs: &[SeedRun]) -> Check {
    ensure(
        runs[0].eval_secs < EVAL_LIMIT_SECS,
        format!("evaluation took {:.0}s", runs[0].eval_secs),
    )?;
    let path = runs[0].dir.join(AOPC_SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let row = |source: &str| -> Result<(f64, f64, usize), String> {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{source},")))
            .ok_or(format!("no {source} row"))?;
        let f: Vec<&str> = line.split(',').collect();
        Ok((
            f[1].parse().unwrap(),
            f[2].parse().unwrap(),
            f[3].parse().unwrap(),
        ))
    };
    let (decoder, _, n) = row("decoder")?;
    let (random, random_std, _) = row("random")?;
    let (shap, _, _) = row("external_shap")?;
    let detail = format!(
        "{EVAL_SAMPLES} test samples x 5 noise seeds ({n} curves): decoder AOPC {decoder:.4}, random {random:.4} (std {random_std:.4}), margin {:.4}; external partition map {shap:.4}; evaluation {:.0}s",
        decoder - random,
        runs[0].eval_secs
    );
    ensure(
        decoder > random && decoder - random > random_std,
        detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

struct Recording<'a> {
    inner: FusedScores<'a>,
    batches: Mutex<Vec<Tensor>>,
}

impl ScoreFn for Recording<'_> {
    fn scores(&self, batch: &Tensor) -> impactx_core::Result<Tensor> {
        self.batches.lock().unwrap().push(batch.clone());
        self.inner.scores(batch)
    }
}

fn morf_mechanics(runs: &[SeedRun]) -> Check {
    let config = synthetic_config();
    let (train, test) = pipeline::load_data(&config).map_err(e2s)?;
    let masker = pipeline::masker_for(&config, &train).map_err(e2s)?;
    let grid = *masker.grid();
    let ranges = train.channel_ranges();

    let mut constant =
        ImpactxModel::new(config.arch().map_err(e2s)?, &mut Rng::new(0)).map_err(e2s)?;
    let ids: Vec<_> = constant.store().iter().map(|p| p.id()).collect();
    for id in ids {
        constant.store_mut().value_mut(id).fill(0.0);
    }
    let trained =
        pipeline::load_model(&config, &runs[0].dir.join(MODEL_CHECKPOINT)).map_err(e2s)?;

    let mut curves = 0;
    for i in 0..10 {
        let x = test.image(i);
        let batch = x.clone().reshape(vec![1, 3, 32, 32]).map_err(e2s)?;
        let noise = noise_image([3, 32, 32], &ranges, &mut Rng::new(i as u64)).map_err(e2s)?;
        let order = Rng::new(100 + i as u64).permutation(grid.len());

        let flat: MorfCurve = morf_curve_ordered(
            &FusedScores(&constant),
            &x,
            &order,
            1,
            &grid,
            1,
            &noise,
            i as u32,
        )
        .map_err(e2s)?;
        ensure(
            flat.aopc == 0.0,
            format!("constant model AOPC {}", flat.aopc),
        )?;

        let pred = trained.predict_impactx(&batch).map_err(e2s)?;
        let class = pred.classes[0];
        let order = region_ranking(&grid, &pred.maps.row(0)).map_err(e2s)?;
        let rec = Recording {
            inner: FusedScores(&trained),
            batches: Mutex::new(Vec::new()),
        };
        let curve =
            morf_curve_ordered(&rec, &x, &order, class, &grid, 1, &noise, i as u32).map_err(e2s)?;
        let unperturbed = trained.impactx_probs(&batch).map_err(e2s)?.data()[class] as f64;
        ensure(
            curve.points[0] == (0.0, unperturbed),
            format!(
                "sample {i}: curve starts at {:?}, score {unperturbed}",
                curve.points[0]
            ),
        )?;

        let seen = rec.batches.into_inner().unwrap();
        let images: Vec<Tensor> = seen
            .iter()
            .flat_map(|b| (0..b.dim(0)).map(|k| b.row(k)).collect::<Vec<_>>())
            .collect();
        ensure(
            images.len() == grid.len() + 1,
            "wrong number of curve points",
        )?;
        let mut replaced = vec![0usize; grid.len()];
        for t in 1..images.len() {
            let (prev, cur) = (images[t - 1].data(), images[t].data());
            for (r, count) in replaced.iter_mut().enumerate() {
                let px: Vec<usize> = grid.pixels(r).collect();
                let was_noise = px
                    .iter()
                    .all(|&p| (0..3).all(|c| prev[c * 1024 + p] == noise[c * 1024 + p]));
                let is_noise = px
                    .iter()
                    .all(|&p| (0..3).all(|c| cur[c * 1024 + p] == noise[c * 1024 + p]));
                let changed = px
                    .iter()
                    .any(|&p| (0..3).any(|c| prev[c * 1024 + p] != cur[c * 1024 + p]));
                if changed {
                    ensure(
                        !was_noise && is_noise,
                        format!("region {r} changed at step {t} without becoming noise"),
                    )?;
                    *count += 1;
                }
            }
        }
        ensure(
            replaced.iter().all(|&c| c == 1),
            format!("sample {i}: replacement counts {replaced:?}"),
        )?;
        ensure(
            images.last().unwrap().data() == &noise[..],
            "final image is not fully perturbed",
        )?;
        curves += 2;
    }
    Ok(format!(
        "{curves} curves on {} regions: constant-model AOPC exactly 0, first point equals unperturbed score, each region replaced exactly once",
        grid.len()
    ))
}

// ---------------------------------------------------------------- 7

fn write_cifar_batch(path: &Path, records: usize, first_label: u8) {
    let mut bytes = Vec::with_capacity(records * CIFAR_RECORD_BYTES);
    for r in 0..records {
        bytes.push(((r + first_label as usize) % 10) as u8);
        bytes.extend((0..CIFAR_RECORD_BYTES - 1).map(|p| ((p * 7 + r) % 256) as u8));
    }
    fs::write(path, bytes).unwrap();
}

fn determinism_and_formats(runs: &[SeedRun], work: &Path) -> Check {
    let smoke = ExperimentConfig::load(&root().join("configs/smoke.toml")).map_err(e2s)?;
    let phases = [Phase::Stage1, Phase::Cache, Phase::Stage2];
    for d in ["det_a", "det_b"] {
        pipeline::run(&smoke, &work.join(d), &phases).map_err(|e| e.to_string())?;
    }
    let read = |p: PathBuf| fs::read(p).map_err(|e| e.to_string());
    let metrics = read(work.join("det_a").join(METRICS))?;
    ensure(
        metrics == read(work.join("det_b").join(METRICS))?,
        "metrics.csv differs between equal-seed runs",
    )?;

    let ckpt_path = runs[0].dir.join(MODEL_CHECKPOINT);
    let ckpt_bytes = read(ckpt_path.clone())?;
    let ckpt = Checkpoint::read(&ckpt_path).map_err(e2s)?;
    ensure(
        ckpt.to_bytes() == ckpt_bytes,
        "checkpoint bytes change on re-serialization",
    )?;
    let config = synthetic_config();
    let model = ImpactxModel::from_checkpoint(config.arch().map_err(e2s)?, &ckpt).map_err(e2s)?;
    ensure(
        model.checkpoint().map_err(e2s)?.to_bytes() == ckpt_bytes,
        "model round-trip changes the checkpoint",
    )?;

    let cache_path = runs[0].dir.join(CACHE);
    let cache_bytes = read(cache_path.clone())?;
    let cache = AttributionCache::read(&cache_path).map_err(e2s)?;
    ensure(
        cache.to_bytes() == cache_bytes,
        "cache bytes change on re-serialization",
    )?;
    let copy = work.join("cache_copy");
    cache.write(&copy).map_err(e2s)?;
    let reread = AttributionCache::read(&copy).map_err(e2s)?;
    let bits_equal = cache.entries().iter().all(|e| {
        let other = reread.get(e.sample_id).unwrap();
        e.map
            .iter()
            .zip(&other.map)
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && e.class == other.class
    });
    ensure(
        bits_equal && reread.len() == cache.len(),
        "cache floats not bit-identical",
    )?;

    let cifar = work.join("cifar");
    fs::create_dir_all(&cifar).unwrap();
    for i in 1..=5 {
        write_cifar_batch(&cifar.join(format!("data_batch_{i}.bin")), 10_000, i as u8);
    }
    write_cifar_batch(&cifar.join("test_batch.bin"), 10_000, 0);
    let (train, test) = load_cifar10_binary(&cifar).map_err(e2s)?;
    ensure(
        train.len() == 50_000 && test.len() == 10_000,
        format!("loaded {}/{}", train.len(), test.len()),
    )?;
    ensure(
        train.images().shape() == [50_000, 3, 32, 32] && train.classes() == 10,
        "wrong CIFAR shape",
    )?;
    ensure(
        train.labels()[0] == 1 && test.labels()[0] == 0,
        "first labels do not match the first record",
    )?;
    ensure(
        train.images().data()[1] == 7.0 / 255.0,
        "pixel scaling is not /255",
    )?;
    drop((train, test));

    let bad = cifar.join("data_batch_1.bin");
    let bytes = read(bad.clone())?;
    fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    let framing = match read_cifar_batch(&bad) {
        Err(Error::Format { offset, .. }) => offset == (9_999 * CIFAR_RECORD_BYTES) as u64,
        _ => false,
    };
    ensure(
        framing,
        "truncated batch not rejected at the last record offset",
    )?;
    Ok(format!(
        "equal-seed metrics.csv identical ({} bytes); checkpoint and cache ({} maps) round-trip bitwise; CIFAR-10 loader reads 50000/10000 records from standard-layout batches and rejects a truncated record",
        metrics.len(),
        cache.len()
    ))
}

// ---------------------------------------------------------------- 8

fn self_explaining_inference(runs: &[SeedRun]) -> Check {
    let sources = ["arch.rs", "checkpoint.rs", "mod.rs", "network.rs"];
    let model_dir = root().join("crates/core/src/model");
    for f in sources {
        let text = fs::read_to_string(model_dir.join(f)).map_err(|e| e.to_string())?;
        ensure(
            !text.contains("explainer"),
            format!("model/{f} refers to the explainer module"),
        )?;
    }
    let config = synthetic_config();
    let model = pipeline::load_model(&config, &runs[0].dir.join(MODEL_CHECKPOINT)).map_err(e2s)?;
    let (_, test) = pipeline::load_data(&config).map_err(e2s)?;
    let (x, _, _) = test.batch(&[0, 1, 2, 3]).map_err(e2s)?;
    let evals_before = evaluations_on_thread();
    let forwards_before = forward_counts();
    let pred = model.predict_impactx(&x).map_err(e2s)?;
    let evals = evaluations_on_thread() - evals_before;
    let forwards: Vec<usize> = forward_counts()
        .iter()
        .zip(forwards_before)
        .map(|(a, b)| a - b)
        .collect();
    ensure(
        evals == 0,
        format!("{evals} explainer evaluations during inference"),
    )?;
    ensure(
        forwards == [1, 1, 1, 1],
        format!("sub-network forwards {forwards:?}"),
    )?;
    ensure(
        pred.classes.len() == 4 && pred.maps.shape() == [4, 1, 32, 32],
        "prediction lacks classes or maps",
    )?;
    Ok("predict_impactx returns 4 labels and 4 maps of 32x32 with one forward per sub-network, 0 explainer evaluations, no explainer reference in the model module".into())
}

// ----------------------------------------------------------------

fn timed(id: usize, f: impl FnOnce() -> Check) -> bool {
    timed_within(id, f64::INFINITY, f)
}

fn timed_within(id: usize, limit: f64, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    let result = result.and_then(|d| {
        if secs < limit {
            Ok(d)
        } else {
            Err(format!("exceeded {limit:.0}s: {d}"))
        }
    });
    match result {
        Ok(detail) => {
            println!("acceptance {id}: PASS ({secs:.1}s) {detail}");
            true
        }
        Err(detail) => {
            println!("acceptance {id}: FAIL ({secs:.1}s) {detail}");
            false
        }
    }
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut ok = true;
    ok &= timed_within(1, PROPERTY_LIMIT_SECS, gradient_correctness);
    ok &= timed_within(2, PROPERTY_LIMIT_SECS, shapley_axioms);
    ok &= timed(3, training_invariants);

    let start = Instant::now();
    let runs = seed_runs(work.path());
    let train_secs = start.elapsed().as_secs_f64();
    match runs {
        Ok(runs) => {
            println!("seed runs: {SEEDS} seeds trained and evaluated in {train_secs:.1}s");
            ok &= timed(4, || fused_accuracy(&runs));
            ok &= timed(5, || explanation_quality(&runs));
            ok &= timed(6, || morf_mechanics(&runs));
            ok &= timed(7, || determinism_and_formats(&runs, work.path()));
            ok &= timed(8, || self_explaining_inference(&runs));
        }
        Err(e) => {
            for id in 4..=8 {
                println!("acceptance {id}: FAIL seed runs failed: {e}");
            }
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
