use crate::error::Result;
use crate::numerics::{kaiming_uniform, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { kernel: ParamId, bias: ParamId },
    Dense { weight: ParamId, bias: ParamId },
    Relu,
    Sigmoid,
    MaxPool,
    Upsample,
    Flatten,
    Reshape(Vec<usize>),
}

/// A sequential sub-network whose parameters live in a shared store.
#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    layers: Vec<Layer>,
    params: Vec<ParamId>,
}

impl Network {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { kernel, bias } => {
                    let (k, b) = (tape.param(*kernel), tape.param(*bias));
                    tape.conv2d(x, k, b)?
                }
                Layer::Dense { weight, bias } => {
                    let (w, b) = (tape.param(*weight), tape.param(*bias));
                    tape.dense(x, w, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::Sigmoid => tape.sigmoid(x),
                Layer::MaxPool => tape.maxpool2d(x)?,
                Layer::Upsample => tape.upsample2x(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Reshape(tail) => {
                    let n = tape.value(x).dim(0);
                    let mut shape = vec![n];
                    shape.extend_from_slice(tail);
                    tape.reshape(x, &shape)?
                }
            };
        }
        Ok(x)
    }
}

/// Appends layers to a network while registering their parameters.
pub(crate) struct NetworkBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    net: Network,
}

impl<'a, T: Real> NetworkBuilder<'a, T> {
    pub fn new(name: &str, store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            net: Network {
                name: name.to_string(),
                layers: Vec::new(),
                params: Vec::new(),
            },
        }
    }

    fn register(&mut self, suffix: &str, value: Tensor<T>) -> ParamId {
        let idx = self.net.layers.len();
        let id = self
            .store
            .add(format!("{}.{idx}.{suffix}", self.net.name), value);
        self.net.params.push(id);
        id
    }

    pub fn conv(mut self, in_ch: usize, filters: usize) -> Self {
        let kernel = kaiming_uniform(vec![filters, in_ch, 3, 3], in_ch * 9, self.rng);
        let kernel = self.register("kernel", kernel);
        let bias = self.register("bias", Tensor::zeros(vec![filters]));
        self.net.layers.push(Layer::Conv { kernel, bias });
        self
    }

    pub fn dense(mut self, fan_in: usize, fan_out: usize) -> Self {
        let weight = kaiming_uniform(vec![fan_in, fan_out], fan_in, self.rng);
        let weight = self.register("weight", weight);
        let bias = self.register("bias", Tensor::zeros(vec![fan_out]));
        self.net.layers.push(Layer::Dense { weight, bias });
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        self.net.layers.push(layer);
        self
    }

    pub fn build(self) -> Network {
        self.net
    }
}
