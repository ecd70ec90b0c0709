//! Two-class "watermark" images: a bright square patch whose position
//! identifies the class, over i.i.d. background noise.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Bumped whenever the generator's output for a given config changes.
pub const SYNTHETIC_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Top-left (row, col) of the patch for class 0 and class 1.
    pub patch_positions: [(usize, usize); 2],
    /// Background pixels are `0.5 + noise_level * (u - 0.5)`, u ~ U[0, 1).
    pub noise_level: f32,
    pub patch_value: f32,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 6,
            patch_positions: [(4, 4), (22, 22)],
            noise_level: 1.0,
            patch_value: 1.0,
            train_samples: 512,
            test_samples: 256,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let s = self.image_size;
        for &(r, c) in &self.patch_positions {
            if r + self.patch_size > s || c + self.patch_size > s {
                return Err(Error::Config(format!(
                    "patch of size {} at ({r}, {c}) overflows {s}x{s} image",
                    self.patch_size
                )));
            }
        }
        if self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Config("empty patch or zero channels".into()));
        }
        if self.patch_positions[0] == self.patch_positions[1] {
            return Err(Error::Config(
                "classes need distinct patch positions".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !(0.0..=1.0).contains(&self.patch_value) {
            return Err(Error::Config(
                "noise level and patch value must lie in [0, 1]".into(),
            ));
        }
        if self.train_samples < 2 || self.test_samples < 2 {
            return Err(Error::Config("need at least two samples per split".into()));
        }
        Ok(())
    }

    fn generate(&self, n: usize, rng: &mut Rng, split: Split) -> Result<LabeledDataset> {
        let (s, c, p) = (self.image_size, self.channels, self.patch_size);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * c * s * s);
        for &label in &labels {
            let (pr, pc) = self.patch_positions[label];
            for _ in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let u = rng.uniform() as f32;
                        let in_patch = (pr..pr + p).contains(&y) && (pc..pc + p).contains(&x);
                        data.push(if in_patch {
                            self.patch_value
                        } else {
                            (0.5 + self.noise_level * (u - 0.5)).clamp(0.0, 1.0)
                        });
                    }
                }
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, c, s, s], data)?, labels, 2, split)
    }
}

/// Returns (train, test); fully determined by the config and its seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let train = config.generate(config.train_samples, &mut root.fork(1), Split::Train)?;
    let test = config.generate(config.test_samples, &mut root.fork(2), Split::Test)?;
    Ok((train, test))
}
