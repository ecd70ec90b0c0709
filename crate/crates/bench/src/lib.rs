//! Fixtures shared by the benchmarks.

use impactx_core::data::{generate_synthetic, LabeledDataset, SyntheticConfig};
use impactx_core::explainer::{Masker, MaskerConfig};
use impactx_core::model::{ImpactxArch, ImpactxModel, TrainingStage};
use impactx_core::{Rng, Tensor};

/// Uniform tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.uniform_range(-1.0, 1.0) as f32)
            .collect(),
    )
    .expect("non-empty shape")
}

/// Small synthetic test split of 32x32 RGB images.
pub fn synthetic_images(n: usize) -> LabeledDataset {
    let config = SyntheticConfig {
        train_samples: 16,
        test_samples: n,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&config)
        .expect("default config is valid")
        .1
}

/// Randomly initialised LeNet-style model marked as fully trained.
pub fn lenet_model() -> ImpactxModel {
    let arch = ImpactxArch::lenet(3, 32, 2).expect("valid architecture");
    let mut model = ImpactxModel::new(arch, &mut Rng::new(0)).expect("model");
    model.set_stage(TrainingStage::Complete);
    model
}

pub fn masker(data: &LabeledDataset, rows: usize, cols: usize) -> Masker {
    let config = MaskerConfig {
        rows,
        cols,
        ..MaskerConfig::default()
    };
    Masker::new(&config, &data.channel_means(), data.image_shape()).expect("masker")
}
