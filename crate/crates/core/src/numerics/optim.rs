use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::param::ParamStore;
use crate::numerics::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// In-place first-order updates of the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    kind: OptimizerKind,
    lr: f64,
    steps: i32,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.steps += 1;
        let lr = T::of(self.lr);
        let ids: Vec<_> = store
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.id())
            .collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    store.update(id, |w, g| {
                        for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                            *wv = *wv - lr * gv;
                        }
                    });
                }
            }
            OptimizerKind::Adam => {
                self.first.resize(store.len(), None);
                self.second.resize(store.len(), None);
                let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPS));
                let c1 = T::one() - T::of(BETA1.powi(self.steps));
                let c2 = T::one() - T::of(BETA2.powi(self.steps));
                for id in ids {
                    let shape = store.value(id).shape().to_vec();
                    let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(shape.clone()));
                    let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(shape));
                    store.update(id, |w, g| {
                        let it = w
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                        for ((wv, &gv), (mv, vv)) in it {
                            *mv = b1 * *mv + (T::one() - b1) * gv;
                            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                            let mhat = *mv / c1;
                            let vhat = *vv / c2;
                            *wv = *wv - lr * mhat / (vhat.sqrt() + eps);
                        }
                    });
                }
            }
        }
    }
}
