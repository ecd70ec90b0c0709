//! Dense tensors, reverse-mode differentiation and the layer primitives the
//! networks are built from.

pub mod kernels;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Activation, Tape, Var};
pub use tensor::{argmax, Real, Tensor};

/// Kaiming-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}
