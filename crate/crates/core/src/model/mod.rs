//! The four sub-networks and their composition.
//!
//! `M` maps an image to `K` class scores and, through `argmax(softmax(m))`,
//! is the standalone baseline classifier. `LEP` encodes the image into a
//! sigmoid latent code `z`, `D` decodes `z` into a one-channel attribution
//! map, and `C` classifies the concatenation `[m, z]`.

mod arch;
mod checkpoint;
mod network;

use std::cell::Cell;

pub use arch::{BackboneSpec, ClassifierSpec, DecoderSpec, ImpactxArch, LepSpec, LATENT_WIDTH};
pub use checkpoint::write_atomic;
pub(crate) use checkpoint::Reader;
pub use checkpoint::{Checkpoint, SubnetWeights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{Layer, Network};

use network::NetworkBuilder;

use crate::error::{Error, Result};
use crate::numerics::{argmax, kernels, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubNet {
    M,
    Lep,
    Decoder,
    Classifier,
}

impl SubNet {
    pub const ALL: [SubNet; 4] = [SubNet::M, SubNet::Lep, SubNet::Decoder, SubNet::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            SubNet::M => "M",
            SubNet::Lep => "LEP",
            SubNet::Decoder => "D",
            SubNet::Classifier => "C",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrainingStage {
    Untrained,
    /// The backbone classifier is trained; the attention branch is not.
    Backbone,
    /// All four sub-networks are trained.
    Complete,
}

thread_local! {
    static FORWARDS: Cell<[usize; 4]> = const { Cell::new([0; 4]) };
}

/// Per-thread count of sub-network forward passes, in [`SubNet::ALL`] order.
pub fn forward_counts() -> [usize; 4] {
    FORWARDS.with(Cell::get)
}

fn count_forward(net: SubNet) {
    FORWARDS.with(|c| {
        let mut v = c.get();
        v[net.index()] += 1;
        c.set(v);
    });
}

#[derive(Debug, Clone)]
pub struct ImpactxModel<T: Real = f32> {
    arch: ImpactxArch,
    store: ParamStore<T>,
    nets: [Network; 4],
    stage: TrainingStage,
}

impl<T: Real> ImpactxModel<T> {
    pub fn new(arch: ImpactxArch, rng: &mut Rng) -> Result<Self> {
        let arch = arch.validated()?;
        let mut store = ParamStore::new();
        let b = &arch.backbone;

        let mut nb = conv_stack(NetworkBuilder::new("M", &mut store, rng), b);
        let mut width = b.feature_width();
        for &h in &b.hidden {
            nb = nb.dense(width, h).layer(Layer::Relu);
            width = h;
        }
        let m = nb.dense(width, b.classes).build();

        let lep = conv_stack(NetworkBuilder::new("LEP", &mut store, rng), b)
            .dense(b.feature_width(), arch.lep.latent)
            .layer(Layer::Sigmoid)
            .build();

        let d = &arch.decoder;
        let mut nb = NetworkBuilder::new("D", &mut store, rng)
            .dense(
                arch.lep.latent,
                d.seed_channels * d.seed_height * d.seed_width,
            )
            .layer(Layer::Relu)
            .layer(Layer::Reshape(vec![
                d.seed_channels,
                d.seed_height,
                d.seed_width,
            ]));
        let mut ch = d.seed_channels;
        for &(f1, f2) in &d.blocks {
            nb = nb
                .conv(ch, f1)
                .layer(Layer::Relu)
                .conv(f1, f2)
                .layer(Layer::Relu)
                .layer(Layer::Upsample);
            ch = f2;
        }
        let decoder = nb.conv(ch, 1).build();

        let mut nb = NetworkBuilder::new("C", &mut store, rng);
        let classifier = match arch.classifier.hidden {
            Some(h) => nb
                .dense(arch.classifier_input(), h)
                .layer(Layer::Relu)
                .dense(h, b.classes)
                .build(),
            None => {
                nb = nb.dense(arch.classifier_input(), b.classes);
                nb.build()
            }
        };

        Ok(Self {
            arch,
            store,
            nets: [m, lep, decoder, classifier],
            stage: TrainingStage::Untrained,
        })
    }

    pub fn arch(&self) -> &ImpactxArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn network(&self, net: SubNet) -> &Network {
        &self.nets[net.index()]
    }

    pub fn params_of(&self, net: SubNet) -> &[ParamId] {
        self.nets[net.index()].params()
    }

    pub fn param_count(&self, net: SubNet) -> usize {
        self.params_of(net)
            .iter()
            .map(|&id| self.store.value(id).len())
            .sum()
    }

    pub fn stage(&self) -> TrainingStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: TrainingStage) {
        self.stage = stage;
    }

    pub fn set_frozen(&mut self, net: SubNet, frozen: bool) {
        for &id in self.nets[net.index()].params() {
            self.store.set_trainable(id, !frozen);
        }
    }

    pub fn is_frozen(&self, net: SubNet) -> bool {
        self.params_of(net)
            .iter()
            .all(|&id| !self.store.is_trainable(id))
    }

    /// Freezes every sub-network except the listed ones.
    pub fn train_only(&mut self, nets: &[SubNet]) {
        for net in SubNet::ALL {
            self.set_frozen(net, !nets.contains(&net));
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.arch.input_shape();
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::dim("model input", x.shape(), &want));
        }
        Ok(())
    }

    /// Class scores `m` of the feature extractor, shape `[n, K]`.
    pub fn forward_m(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        count_forward(SubNet::M);
        self.nets[0].forward(tape, x)
    }

    /// Latent code `z`, shape `[n, latent]`, entries in (0, 1).
    pub fn forward_lep(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        count_forward(SubNet::Lep);
        self.nets[1].forward(tape, x)
    }

    /// Predicted attribution map, shape `[n, 1, h, w]`.
    pub fn forward_decoder(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let zt = tape.value(z);
        if zt.rank() != 2 || zt.dim(1) != self.arch.lep.latent {
            return Err(Error::dim(
                "decoder input",
                zt.shape(),
                &[self.arch.lep.latent],
            ));
        }
        count_forward(SubNet::Decoder);
        self.nets[2].forward(tape, z)
    }

    /// Fused logits from `concat(m, z)`.
    pub fn forward_classifier(&self, tape: &mut Tape<'_, T>, m: Var, z: Var) -> Result<Var> {
        let (mt, zt) = (tape.value(m), tape.value(z));
        if mt.rank() != 2 || mt.dim(1) != self.arch.classes() {
            return Err(Error::dim(
                "classifier m input",
                mt.shape(),
                &[self.arch.classes()],
            ));
        }
        if zt.rank() != 2 || zt.dim(1) != self.arch.lep.latent {
            return Err(Error::dim(
                "classifier z input",
                zt.shape(),
                &[self.arch.lep.latent],
            ));
        }
        let mz = tape.concat(m, z)?;
        count_forward(SubNet::Classifier);
        self.nets[3].forward(tape, mz)
    }

    /// Records the whole dual-branch forward; returns (m, z, logits, map).
    pub fn forward_all(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<ForwardVars> {
        let m = self.forward_m(tape, x)?;
        let z = self.forward_lep(tape, x)?;
        let logits = self.forward_classifier(tape, m, z)?;
        let map = self.forward_decoder(tape, z)?;
        Ok(ForwardVars { m, z, logits, map })
    }

    /// Baseline scores `m` for a batch, evaluated eagerly.
    pub fn m_scores(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x.clone());
        let m = self.forward_m(&mut tape, xv)?;
        Ok(tape.value(m).clone())
    }

    /// Softmax of the baseline scores.
    pub fn baseline_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::softmax(&self.m_scores(x)?)
    }

    /// Baseline classifier `argmax(softmax(M(x)))`, first index on ties.
    pub fn predict_baseline(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let p = self.baseline_probs(x)?;
        Ok(p.data().chunks_exact(p.dim(1)).map(argmax).collect())
    }

    /// Fused class probabilities and decoder maps, without a stage check.
    pub fn impactx_outputs(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x.clone());
        let out = self.forward_all(&mut tape, xv)?;
        let probs = kernels::softmax(tape.value(out.logits))?;
        Ok((probs, tape.value(out.map).clone()))
    }

    /// Fused class probabilities only.
    pub fn impactx_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x.clone());
        let m = self.forward_m(&mut tape, xv)?;
        let z = self.forward_lep(&mut tape, xv)?;
        let logits = self.forward_classifier(&mut tape, m, z)?;
        kernels::softmax(tape.value(logits))
    }

    /// Self-explaining inference: fused predictions plus the decoder's maps.
    /// Requires a fully trained model.
    pub fn predict_impactx(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        if self.stage != TrainingStage::Complete {
            return Err(Error::State(format!(
                "predict_impactx needs a fully trained model, stage is {:?}",
                self.stage
            )));
        }
        let (probs, maps) = self.impactx_outputs(x)?;
        let classes = probs
            .data()
            .chunks_exact(probs.dim(1))
            .map(argmax)
            .collect();
        Ok(Prediction {
            classes,
            probs,
            maps,
        })
    }

    pub fn cast<U: Real>(&self) -> ImpactxModel<U> {
        ImpactxModel {
            arch: self.arch.clone(),
            store: self.store.cast(),
            nets: self.nets.clone(),
            stage: self.stage,
        }
    }

    /// Copies every parameter value of `net` out of the store.
    pub fn snapshot(&self, net: SubNet) -> Vec<Tensor<T>> {
        self.params_of(net)
            .iter()
            .map(|&id| self.store.value(id).clone())
            .collect()
    }

    pub fn restore(&mut self, net: SubNet, values: &[Tensor<T>]) -> Result<()> {
        let ids = self.params_of(net).to_vec();
        if ids.len() != values.len() {
            return Err(Error::Compatibility(format!(
                "{} expects {} tensors, got {}",
                net.name(),
                ids.len(),
                values.len()
            )));
        }
        for (id, v) in ids.into_iter().zip(values) {
            self.store.set_value(id, v.clone())?;
        }
        Ok(())
    }
}

impl ImpactxModel<f32> {
    /// Sub-networks to persist for the current stage: `M` alone after stage
    /// one, all four once training is complete.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let nets: &[SubNet] = match self.stage {
            TrainingStage::Untrained => {
                return Err(Error::State(
                    "refusing to checkpoint an untrained model".into(),
                ))
            }
            TrainingStage::Backbone => &[SubNet::M],
            TrainingStage::Complete => &SubNet::ALL,
        };
        Ok(Checkpoint {
            subnets: nets
                .iter()
                .map(|&n| SubnetWeights {
                    name: n.name().to_string(),
                    params: self.snapshot(n),
                })
                .collect(),
        })
    }

    /// Loads a checkpoint into a freshly constructed model of `arch`.
    pub fn from_checkpoint(arch: ImpactxArch, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(arch, &mut Rng::new(0))?;
        let mut present = Vec::new();
        for s in &ckpt.subnets {
            let net = SubNet::ALL
                .into_iter()
                .find(|n| n.name() == s.name)
                .ok_or_else(|| Error::Compatibility(format!("unknown sub-network {}", s.name)))?;
            model.restore(net, &s.params)?;
            present.push(net);
        }
        model.stage = if SubNet::ALL.iter().all(|n| present.contains(n)) {
            TrainingStage::Complete
        } else if present.contains(&SubNet::M) {
            TrainingStage::Backbone
        } else {
            return Err(Error::State("checkpoint holds no backbone".into()));
        };
        if model.stage == TrainingStage::Complete {
            model.set_frozen(SubNet::M, true);
        }
        Ok(model)
    }
}

fn conv_stack<'a, T: Real>(
    mut nb: NetworkBuilder<'a, T>,
    b: &BackboneSpec,
) -> NetworkBuilder<'a, T> {
    let mut in_ch = b.channels;
    for &f in &b.conv_filters {
        nb = nb.conv(in_ch, f).layer(Layer::Relu).layer(Layer::MaxPool);
        in_ch = f;
    }
    nb.layer(Layer::Flatten)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub m: Var,
    pub z: Var,
    pub logits: Var,
    pub map: Var,
}

#[derive(Debug, Clone)]
pub struct Prediction<T = f32> {
    pub classes: Vec<usize>,
    pub probs: Tensor<T>,
    /// Decoder attribution maps, `[n, 1, h, w]`.
    pub maps: Tensor<T>,
}
