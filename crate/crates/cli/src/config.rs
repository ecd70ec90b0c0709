//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use impactx_core::data::SyntheticConfig;
use impactx_core::evaluation::{MapSource, MorfConfig};
use impactx_core::explainer::{MaskerConfig, DEFAULT_BUDGET};
use impactx_core::model::ImpactxArch;
use impactx_core::trainer::{CacheRun, GridSpace, TrainConfig};
use impactx_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of the CIFAR-10 binary batches; relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Keep only the first samples of each split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Lenet,
    /// A few hundred parameters; for smoke tests.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub budget: usize,
    /// Samples between cache flushes to disk.
    pub chunk: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test samples used for the perturbation curves.
    pub samples: usize,
    pub step_regions: usize,
    pub noise_seeds: usize,
    pub shap_budget: usize,
    pub sources: Vec<MapSource>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let morf = MorfConfig::default();
        Self {
            samples: 50,
            step_regions: morf.step_regions,
            noise_seeds: morf.noise_seeds,
            shap_budget: morf.shap_budget,
            sources: vec![
                MapSource::Decoder,
                MapSource::ExternalShap,
                MapSource::Random,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialization, splits, shuffling and evaluation noise.
    /// Overrides `train.seed`.
    pub seed: u64,
    /// Threads for the explainer and evaluation; 0 uses all cores.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub masker: MaskerConfig,
    pub cache: CacheConfig,
    pub train: TrainConfig,
    /// Stage-2 hyperparameter search; a single cell of `train` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpace>,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.train.seed = config.seed;
        Ok(config)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.path, &mut config.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.source == DataSource::Cifar10 {
            match &self.data.path {
                Some(p) if p.is_dir() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "data path {} is not a directory",
                        p.display()
                    )))
                }
                None => return Err(Error::Config("cifar10 data needs `data.path`".into())),
            }
        }
        if self.eval.samples == 0 || self.eval.sources.is_empty() {
            return Err(Error::Config(
                "evaluation needs samples and at least one map source".into(),
            ));
        }
        if self.grid.as_ref().is_some_and(GridSpace::is_empty) {
            return Err(Error::Config("grid search space is empty".into()));
        }
        self.arch().map(|_| ())
    }

    pub fn arch(&self) -> Result<ImpactxArch> {
        let (channels, size) = match self.data.source {
            DataSource::Synthetic => (self.data.synthetic.channels, self.data.synthetic.image_size),
            DataSource::Cifar10 => (3, 32),
        };
        let classes = match self.data.source {
            DataSource::Synthetic => 2,
            DataSource::Cifar10 => impactx_core::data::CIFAR10_CLASSES,
        };
        match self.model.backbone {
            Backbone::Lenet => ImpactxArch::lenet(channels, size, classes),
            Backbone::Tiny => ImpactxArch::tiny(channels, size, classes),
        }
    }

    pub fn cache_run(&self) -> CacheRun {
        CacheRun {
            budget: self.cache.budget,
            workers: self.workers,
            chunk: self.cache.chunk,
        }
    }

    pub fn morf(&self) -> MorfConfig {
        MorfConfig {
            step_regions: self.eval.step_regions,
            noise_seeds: self.eval.noise_seeds,
            seed: self.seed,
            shap_budget: self.eval.shap_budget,
            workers: self.workers,
        }
    }

    pub fn grid_space(&self) -> GridSpace {
        self.grid
            .clone()
            .unwrap_or_else(|| GridSpace::single(&self.train))
    }

    /// Short digest of everything that affects results: the output
    /// directory and worker count are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        canonical.workers = 0;
        let text = toml::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
