use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature extractor `M`: LeNet-style conv blocks (conv, relu, 2x2 pool)
/// followed by a fully connected stack ending in `classes` scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_filters: Vec<usize>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl BackboneSpec {
    /// Spatial size and channel count after the conv blocks.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let div = 1 << self.conv_filters.len();
        let c = self.conv_filters.last().copied().unwrap_or(self.channels);
        (c, self.height / div, self.width / div)
    }

    pub fn feature_width(&self) -> usize {
        let (c, h, w) = self.feature_shape();
        c * h * w
    }
}

/// Latent explanation predictor: the backbone's conv stack with the fully
/// connected stack replaced by a single sigmoid layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LepSpec {
    pub latent: usize,
}

/// Decoder: FC from the latent code to a seed grid, then
/// `[conv, conv, upsample]` blocks and a final single-channel conv.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub seed_channels: usize,
    pub seed_height: usize,
    pub seed_width: usize,
    /// Filters of the two convs in each block.
    pub blocks: Vec<(usize, usize)>,
}

impl DecoderSpec {
    pub fn output_size(&self) -> (usize, usize) {
        let up = 1 << self.blocks.len();
        (self.seed_height * up, self.seed_width * up)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactxArch {
    pub backbone: BackboneSpec,
    pub lep: LepSpec,
    pub decoder: DecoderSpec,
    pub classifier: ClassifierSpec,
}

pub const LATENT_WIDTH: usize = 512;

impl ImpactxArch {
    /// LeNet-5 adapted to `channels` inputs, 512-wide latent, and a decoder
    /// with as many upsampling blocks as needed to reach `size`.
    pub fn lenet(channels: usize, size: usize, classes: usize) -> Result<Self> {
        if !size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {size} must be divisible by 4"
            )));
        }
        let mut blocks = 2;
        while size.is_multiple_of(1 << blocks) && size >> blocks > 12 {
            blocks += 1;
        }
        if !size.is_multiple_of(1 << blocks) {
            return Err(Error::Config(format!(
                "no decoder seed grid for image size {size}"
            )));
        }
        let seed = size >> blocks;
        let mut filters = Vec::with_capacity(blocks);
        let mut c = 32usize;
        for _ in 0..blocks {
            let next = (c / 2).max(8);
            filters.push((next, next));
            c = next;
        }
        Self {
            backbone: BackboneSpec {
                channels,
                height: size,
                width: size,
                conv_filters: vec![6, 16],
                hidden: vec![120, 84],
                classes,
            },
            lep: LepSpec {
                latent: LATENT_WIDTH,
            },
            decoder: DecoderSpec {
                seed_channels: 32,
                seed_height: seed,
                seed_width: seed,
                blocks: filters,
            },
            classifier: ClassifierSpec { hidden: Some(128) },
        }
        .validated()
    }

    /// A model of a few hundred parameters for gradient checks and smoke tests.
    pub fn tiny(channels: usize, size: usize, classes: usize) -> Result<Self> {
        Self {
            backbone: BackboneSpec {
                channels,
                height: size,
                width: size,
                conv_filters: vec![2],
                hidden: vec![],
                classes,
            },
            lep: LepSpec { latent: 4 },
            decoder: DecoderSpec {
                seed_channels: 2,
                seed_height: size / 2,
                seed_width: size / 2,
                blocks: vec![(2, 2)],
            },
            classifier: ClassifierSpec { hidden: Some(3) },
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let b = &self.backbone;
        if b.classes < 2 {
            return Err(Error::Config("at least two classes required".into()));
        }
        let div = 1 << b.conv_filters.len();
        if !b.height.is_multiple_of(div) || !b.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by pooling factor {div}",
                b.height, b.width
            )));
        }
        if self.decoder.output_size() != (b.height, b.width) {
            return Err(Error::Config(format!(
                "decoder emits {:?}, input is {}x{}",
                self.decoder.output_size(),
                b.height,
                b.width
            )));
        }
        if self.lep.latent == 0 || b.channels == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        Ok(self)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.backbone.channels,
            self.backbone.height,
            self.backbone.width,
        ]
    }

    pub fn classes(&self) -> usize {
        self.backbone.classes
    }

    /// Input width of the fused classifier: class scores plus latent code.
    pub fn classifier_input(&self) -> usize {
        self.backbone.classes + self.lep.latent
    }
}
