//! Composite blocks: CBS, C2F (original and Faster-EMA), PConv, EMA, CPCA,
//! SPPF and SPPF_CPCA.
//!
//! Blocks are plain descriptions (names + configuration). Their weights live
//! in a [`Weights`] store keyed by dotted names, and a forward pass records
//! onto a [`Forward`] context that owns the gradient tape.

mod c2f;
mod cpca;
mod ema;
mod layers;
mod pconv;
mod sppf;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{cfg_err, Error, Result};
use crate::tensor::{Fault, Real, Shape, Tape, Tensor, Var};

pub use c2f::{Bottleneck, BottleneckKind, C2f, C2fVariant, FasterEmaBottleneck};
pub use cpca::{Cpca, CpcaConfig};
pub use ema::{Ema, EmaConfig};
pub use layers::{Cbs, Conv, DepthwiseConv, DwSeparable};
pub use pconv::{PConv, PConvConfig, Partition};
pub use sppf::Sppf;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameter and buffer tensors for a model or block.
///
/// Parameters are trainable; buffers hold batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Weights<T> {
    pub fn new() -> Self {
        Weights {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(cfg_err!("duplicate parameter name {name}"));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.buffers.contains_key(&name) {
            return Err(cfg_err!("duplicate buffer name {name}"));
        }
        self.buffers.insert(name, t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| cfg_err!("missing parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| cfg_err!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| cfg_err!("missing buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| cfg_err!("missing buffer {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Applies staged buffer writes produced by a training-mode forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in updates {
            *self.buffer_mut(&name)? = t;
        }
        Ok(())
    }

    /// Copies every tensor present in both stores from `other`.
    pub fn copy_shared_from(&mut self, other: &Weights<T>) {
        for (k, v) in self.params.iter_mut() {
            if let Some(src) = other.params.get(k) {
                if src.shape() == v.shape() {
                    *v = src.clone();
                }
            }
        }
        for (k, v) in self.buffers.iter_mut() {
            if let Some(src) = other.buffers.get(k) {
                if src.shape() == v.shape() {
                    *v = src.clone();
                }
            }
        }
    }

    /// Kaiming-uniform (ReLU gain) weight for a convolution.
    pub(crate) fn add_kaiming(&mut self, name: String, shape: Shape, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        let fan_in = shape.c() * shape.h() * shape.w();
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| T::cast(rng.random_range(-bound..bound)))
            .collect();
        self.add_param(name, Tensor::new(shape, data)?)
    }

    pub(crate) fn add_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let s = Shape([1, channels, 1, 1]);
        self.add_param(format!("{prefix}.gamma"), Tensor::ones(s))?;
        self.add_param(format!("{prefix}.beta"), Tensor::zeros(s))?;
        self.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(s))?;
        self.add_buffer(format!("{prefix}.running_var"), Tensor::ones(s))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates staged.
    Train,
    /// Running statistics.
    Infer,
}

/// One forward pass: the tape, read-only weights and staged buffer updates.
pub struct Forward<'w, T: Real> {
    pub tape: Tape<T>,
    weights: &'w Weights<T>,
    bound: HashMap<String, Var>,
    mode: Mode,
    param_grads: bool,
    updates: Vec<(String, Tensor<T>)>,
}

impl<'w, T: Real> Forward<'w, T> {
    /// Parameters are tracked for gradients in training mode only.
    pub fn new(weights: &'w Weights<T>, mode: Mode) -> Self {
        Forward {
            tape: Tape::new(),
            weights,
            bound: HashMap::new(),
            mode,
            param_grads: mode == Mode::Train,
            updates: Vec::new(),
        }
    }

    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.param_grads = on;
        self
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.tape = Tape::with_fault(fault);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn weights(&self) -> &Weights<T> {
        self.weights
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(t, requires_grad)
    }

    /// Tape leaf for a named parameter, created once per pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.weights.param(name)?.clone();
        let v = self.tape.leaf(t, self.param_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Gradients of every parameter touched by this pass, in store order.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.weights
            .params()
            .filter_map(|(name, t)| {
                let v = self.bound.get(name)?;
                let g = self.tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                Some((name.to_string(), g))
            })
            .collect()
    }

    pub fn into_updates(self) -> Vec<(String, Tensor<T>)> {
        self.updates
    }

    /// Batch norm named `prefix` (parameters `gamma`/`beta`, buffers
    /// `running_mean`/`running_var`).
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = T::cast(BN_EPS);
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self.mode {
            Mode::Infer => {
                let rm = self.weights.buffer(&mean_name)?.data();
                let rv = self.weights.buffer(&var_name)?.data();
                self.tape.batch_norm_infer(x, gamma, beta, rm, rv, eps)
            }
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::cast(BN_MOMENTUM);
                let blend = |old: &Tensor<T>, new: &[T]| -> Result<Tensor<T>> {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(&o, &n)| (T::one() - m) * o + m * n)
                        .collect();
                    Tensor::new(old.shape(), data)
                };
                let rm = blend(self.weights.buffer(&mean_name)?, &stats.mean)?;
                let rv = blend(self.weights.buffer(&var_name)?, &stats.var)?;
                self.updates.push((mean_name, rm));
                self.updates.push((var_name, rv));
                Ok(y)
            }
        }
    }
}

pub(crate) fn expect_channels(got: Shape, want: usize, who: &str) -> Result<()> {
    if got.c() != want {
        return Err(Error::Dimension(format!("{who} expects {want} channels, got {got}")));
    }
    Ok(())
}
