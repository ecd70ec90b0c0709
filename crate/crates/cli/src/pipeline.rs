//! Phase orchestration: stage 1, attribution cache, stage 2, evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use impactx_core::data::{
    generate_synthetic, load_cifar10_binary, AttributionCache, LabeledDataset,
};
use impactx_core::evaluation::{accuracy, compare_maps, write_aopc_summary_csv, write_morf_csv};
use impactx_core::explainer::Masker;
use impactx_core::model::{Checkpoint, ImpactxModel, SubNet};
use impactx_core::trainer::{
    csv_writer, generate_attribution_cache, grid_search, stage1_train, stage2_train,
    write_grid_csv, write_metrics_csv, EpochReport, TrainReport,
};
use impactx_core::{write_atomic, Error, Result, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.csv";
pub const GRID: &str = "grid.csv";
pub const MORF: &str = "morf.csv";
pub const AOPC_SUMMARY: &str = "aopc_summary.csv";
pub const ACCURACY: &str = "accuracy.csv";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const CACHE: &str = "attributions.cache";
pub const STAGE1_EPOCHS: &str = "stage1_epochs.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Cache,
    Stage2,
    Eval,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Stage1, Phase::Cache, Phase::Stage2, Phase::Eval];
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Stage1 => "stage1",
            Phase::Cache => "cache",
            Phase::Stage2 => "stage2",
            Phase::Eval => "eval",
        })
    }
}

/// An error together with the phase that raised it.
#[derive(Debug, thiserror::Error)]
#[error("phase {phase}: {source}")]
pub struct PhaseError {
    pub phase: String,
    #[source]
    pub source: Error,
}

impl PhaseError {
    pub fn new(phase: impl fmt::Display, source: Error) -> Self {
        Self {
            phase: phase.to_string(),
            source,
        }
    }
}

/// Record of a run directory: which config produced it and which phases
/// have finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub completed: Vec<Phase>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn is_done(&self, phase: Phase) -> bool {
        self.completed.contains(&phase)
    }
}

/// What a call to [`run`] did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutcome {
    pub executed: Vec<Phase>,
    pub skipped: Vec<Phase>,
}

/// Training and test data as configured.
pub fn load_data(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match config.data.source {
        DataSource::Synthetic => generate_synthetic(&config.data.synthetic)?,
        DataSource::Cifar10 => {
            let path = config
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("missing data.path".into()))?;
            load_cifar10_binary(path)?
        }
    };
    let cut = |d: LabeledDataset, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.take(n),
        _ => Ok(d),
    };
    Ok((
        cut(train, config.data.max_train)?,
        cut(test, config.data.max_test)?,
    ))
}

pub fn masker_for(config: &ExperimentConfig, train: &LabeledDataset) -> Result<Masker> {
    Masker::new(&config.masker, &train.channel_means(), train.image_shape())
}

/// `# config_hash=... seed=...` metadata written into every artifact.
pub fn artifact_meta(config: &ExperimentConfig) -> Vec<(&'static str, String)> {
    vec![
        ("config_hash", config.hash()),
        ("seed", config.seed.to_string()),
    ]
}

pub fn load_model(config: &ExperimentConfig, path: &Path) -> Result<ImpactxModel> {
    ImpactxModel::from_checkpoint(config.arch()?, &Checkpoint::read(path)?)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    manifest: Manifest,
    train: LabeledDataset,
    test: LabeledDataset,
}

impl Context<'_> {
    fn require(&self, phase: Phase, before: Phase) -> Result<()> {
        if self.manifest.is_done(before) {
            Ok(())
        } else {
            Err(Error::State(format!(
                "{phase} needs a completed {before} phase in {}",
                self.out.display()
            )))
        }
    }

    fn finish(&mut self, phase: Phase) -> Result<()> {
        self.manifest.completed.retain(|&p| p < phase);
        self.manifest.completed.push(phase);
        self.manifest.write(self.out)
    }

    fn write_metrics(&self, stage1: &[EpochReport], stage2: &[EpochReport]) -> Result<()> {
        let all: Vec<EpochReport> = stage1.iter().chain(stage2).cloned().collect();
        write_metrics_csv(&self.out.join(METRICS), &all, &artifact_meta(self.config))
    }

    fn stage1(&mut self) -> Result<()> {
        let arch = self.config.arch()?;
        let mut model = ImpactxModel::new(arch, &mut Rng::new(self.config.seed))?;
        let report = stage1_train(&mut model, &self.train, &self.config.train, &mut ())?;
        model
            .checkpoint()?
            .write(&self.out.join(STAGE1_CHECKPOINT))?;
        write_report(&self.out.join(STAGE1_EPOCHS), &report)?;
        self.write_metrics(&report.epochs, &[])?;
        self.finish(Phase::Stage1)
    }

    fn cache(&mut self) -> Result<()> {
        self.require(Phase::Cache, Phase::Stage1)?;
        let model = load_model(self.config, &self.out.join(STAGE1_CHECKPOINT))?;
        let masker = masker_for(self.config, &self.train)?;
        let path = self.out.join(CACHE);
        let [_, h, w] = self.train.image_shape();
        let mut cache = if path.exists() {
            AttributionCache::read(&path)?
        } else {
            AttributionCache::new(h, w)
        };
        let run = self.config.cache_run();
        generate_attribution_cache(&model, &self.train, &masker, &run, &mut cache, &mut |c| {
            c.write(&path)
        })?;
        cache.write(&path)?;
        self.finish(Phase::Cache)
    }

    fn stage2(&mut self) -> Result<()> {
        self.require(Phase::Stage2, Phase::Cache)?;
        let mut base = load_model(self.config, &self.out.join(STAGE1_CHECKPOINT))?;
        base.set_frozen(SubNet::M, true);
        let cache = AttributionCache::read(&self.out.join(CACHE))?;
        if let Some(&missing) = self.train.ids().iter().find(|&&id| !cache.contains(id)) {
            return Err(Error::Data(format!(
                "attribution cache is incomplete (sample {missing} missing)"
            )));
        }
        let mut best: Option<(f64, ImpactxModel, TrainReport)> = None;
        let result = grid_search(&self.config.train, &self.config.grid_space(), |cell| {
            let mut model = base.clone();
            let report = stage2_train(&mut model, &self.train, &cache, cell, &mut ())?;
            let acc = report.best_val_acc;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, model, report));
            }
            Ok(acc)
        })?;
        let (_, model, report) = best.expect("grid has at least one cell");
        write_grid_csv(&self.out.join(GRID), &result, &artifact_meta(self.config))?;
        model
            .checkpoint()?
            .write(&self.out.join(MODEL_CHECKPOINT))?;
        let stage1 = read_report(&self.out.join(STAGE1_EPOCHS))?;
        self.write_metrics(&stage1, &report.epochs)?;
        self.finish(Phase::Stage2)
    }

    fn eval(&mut self) -> Result<()> {
        self.require(Phase::Eval, Phase::Stage2)?;
        let model = load_model(self.config, &self.out.join(MODEL_CHECKPOINT))?;
        let baseline = accuracy(|x| model.predict_baseline(x), &self.test)?;
        let fused = accuracy(|x| Ok(model.predict_impactx(x)?.classes), &self.test)?;
        let meta = artifact_meta(self.config);
        let path = self.out.join(ACCURACY);
        let mut w = csv_writer(&path, &meta)?;
        w.write_record(["model", "accuracy", "n"])?;
        w.write_record([
            "baseline",
            &baseline.to_string(),
            &self.test.len().to_string(),
        ])?;
        w.write_record(["impactx", &fused.to_string(), &self.test.len().to_string()])?;
        w.flush()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

        let subset = self.test.take(self.config.eval.samples)?;
        let masker = masker_for(self.config, &self.train)?;
        let ranges = self.train.channel_ranges();
        let cmp = compare_maps(
            &model,
            &subset,
            &self.config.eval.sources,
            &masker,
            &ranges,
            &self.config.morf(),
        )?;
        write_morf_csv(&self.out.join(MORF), &cmp, &meta)?;
        write_aopc_summary_csv(&self.out.join(AOPC_SUMMARY), &cmp, &meta)?;
        self.finish(Phase::Eval)
    }
}

/// Stage-1 epoch reports kept between invocations so that `metrics.csv`
/// can be rebuilt after stage 2 without re-training.
fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let mut text = String::new();
    for e in &report.epochs {
        text.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            e.epoch, e.ce, e.mse, e.combined, e.val_acc, e.val_ce, e.val_mse
        ));
    }
    write_atomic(path, text.as_bytes())
}

fn read_report(path: &Path) -> Result<Vec<EpochReport>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = || Error::Data(format!("{} is corrupt", path.display()));
    text.lines()
        .map(|line| {
            let f: Vec<f64> = line
                .split(' ')
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(EpochReport {
                phase: impactx_core::trainer::Phase::Stage1,
                epoch: f[0] as usize,
                ce: f[1],
                mse: f[2],
                combined: f[3],
                val_acc: f[4],
                val_ce: f[5],
                val_mse: f[6],
                seconds: None,
            })
        })
        .collect()
}

/// Runs `phases` in order inside `out`, skipping those already completed
/// for the same configuration.
pub fn run(
    config: &ExperimentConfig,
    out: &Path,
    phases: &[Phase],
) -> std::result::Result<RunOutcome, PhaseError> {
    let setup = |e| PhaseError::new("setup", e);
    config.validate().map_err(setup)?;
    fs::create_dir_all(out).map_err(|e| {
        setup(Error::Config(format!(
            "cannot create {}: {e}",
            out.display()
        )))
    })?;
    let hash = config.hash();
    let manifest = match Manifest::read(out).map_err(setup)? {
        Some(m) if m.config_hash != hash => {
            return Err(setup(Error::Config(format!(
                "{} holds a run of config {}, not {hash}",
                out.display(),
                m.config_hash
            ))))
        }
        Some(m) => m,
        None => Manifest {
            config_hash: hash,
            seed: config.seed,
            completed: Vec::new(),
        },
    };
    let (train, test) = load_data(config).map_err(setup)?;
    let mut ctx = Context {
        config,
        out,
        manifest,
        train,
        test,
    };
    let mut outcome = RunOutcome::default();
    for &phase in phases {
        if ctx.manifest.is_done(phase) {
            outcome.skipped.push(phase);
            continue;
        }
        let result = match phase {
            Phase::Stage1 => ctx.stage1(),
            Phase::Cache => ctx.cache(),
            Phase::Stage2 => ctx.stage2(),
            Phase::Eval => ctx.eval(),
        };
        result.map_err(|e| PhaseError::new(phase, e))?;
        outcome.executed.push(phase);
    }
    Ok(outcome)
}

/// The output directory: `--out` if given, else `out` from the config.
pub fn output_dir(config: &ExperimentConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))
}

/// Whether a finished model is stored in `dir`.
pub fn is_trained(dir: &Path) -> bool {
    Manifest::read(dir)
        .ok()
        .flatten()
        .is_some_and(|m| m.is_done(Phase::Stage2))
}
