use std::collections::HashMap;

use crate::error::{cfg_err, Result};
use crate::nn::Weights;
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, weights: &mut Weights<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        let lr = T::cast(self.lr);
        let mu = T::cast(self.momentum);
        for (name, g) in grads {
            let w = weights.param_mut(name)?;
            if w.shape() != g.shape() {
                return Err(cfg_err!(
                    "gradient for {name} has shape {}, weight {}",
                    g.shape(),
                    w.shape()
                ));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *wv -= lr * *vv;
            }
        }
        Ok(())
    }
}
