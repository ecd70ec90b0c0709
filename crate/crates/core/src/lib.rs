//! Explanation-guided image classification.
//!
//! A backbone classifier is paired with an attention branch (a latent
//! explanation predictor and a decoder) that learns to reconstruct Shapley
//! attribution maps of the true class. The fused classifier reads both the
//! backbone scores and the latent code, and the decoder yields an
//! attribution map at inference time without calling an explainer.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use model::write_atomic;
pub use numerics::{Rng, Tensor};
