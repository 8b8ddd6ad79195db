use super::conv::{self, ConvParams};
use super::elementwise::{self, BinaryKind, UnaryKind};
use super::layout::{self, Axis};
use super::norm;
use super::pool;
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate faults used to prove that the gradient checks catch broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales every convolution input/weight gradient by 1.5.
    ConvBackward,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: ConvParams,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: (usize, usize),
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Mean {
        input: Var,
        axis: Axis,
    },
    MaxHw {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Per-channel normalisation over (N, H, W) (`per_sample == false`) or
    /// over (H, W) for each sample (`per_sample == true`).
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        per_sample: bool,
    },
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Upsample {
        input: Var,
    },
    Downsample {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    SumChannels {
        input: Var,
    },
    Sum {
        input: Var,
        scale: T,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        scale: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv {
                input, weight, bias, ..
            }
            | Op::Depthwise {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Norm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::Bce { logits, .. } => vec![*logits],
            Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. }
            | Op::Mean { input, .. }
            | Op::MaxHw { input, .. }
            | Op::Unary { input, .. }
            | Op::Scale { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape { input }
            | Op::Upsample { input }
            | Op::Downsample { input }
            | Op::SoftmaxChannels { input }
            | Op::SumChannels { input }
            | Op::Sum { input, .. } => vec![*input],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of primitive operations.
///
/// Every operation appends one node whose inputs are earlier nodes, so node
/// order is a topological order and [`Tape::backward`] is a single reverse
/// sweep. Gradients accumulate on leaves until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Tape {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a 1x1x1x1 scalar, got {shape}"
            )));
        }
        self.backward_with_seed(root, Tensor::scalar(T::one()))
    }

    /// Reverse sweep from an arbitrary node seeded with `seed` (same shape).
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Dimension(format!(
                "seed shape {} does not match root {}",
                seed.shape(),
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape();
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, contrib) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&contrib) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
                params,
            } => {
                let (mut dx, mut dw, db) = conv::conv2d_backward(val(input), val(weight), params, g, wants(input));
                if self.fault == Some(Fault::ConvBackward) {
                    let k = T::cast(1.5);
                    dx.iter_mut().for_each(|v| *v *= k);
                    dw.iter_mut().for_each(|v| *v *= k);
                }
                let mut res = vec![(*weight, dw)];
                if wants(input) {
                    res.push((*input, dx));
                }
                if let Some(b) = bias {
                    res.push((*b, db));
                }
                res
            }
            Op::Depthwise {
                input,
                weight,
                bias,
                kernel,
            } => {
                let (dx, dw, db) = conv::depthwise_backward(val(input), val(weight), *kernel, g);
                let mut res = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    res.push((*b, db));
                }
                res
            }
            Op::MaxPool { input, argmax } | Op::MaxHw { input, argmax } => {
                vec![(*input, pool::scatter_argmax(val(input).numel(), argmax, g))]
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
                padding,
            } => vec![(
                *input,
                pool::avg_pool_backward(val(input).shape(), out.shape(), *kernel, *stride, *padding, g),
            )],
            Op::Mean { input, axis } => {
                vec![(*input, layout::mean_backward(val(input).shape(), *axis, g))]
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                per_sample,
            } => {
                let (dx, dgamma, dbeta) = norm::norm_backward(
                    val(input).shape(),
                    val(gamma).data(),
                    xhat,
                    inv_std,
                    *batch_stats,
                    *per_sample,
                    g,
                );
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Unary { input, kind } => {
                vec![(
                    *input,
                    elementwise::unary_backward(*kind, val(input).data(), out.data(), g),
                )]
            }
            Op::Binary { a, b, kind } => {
                let (da, db) = elementwise::binary_backward(*kind, val(a), val(b), out.shape(), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => {
                vec![(*input, g.iter().map(|&v| v * *factor).collect())]
            }
            Op::Concat { inputs } => {
                let shapes: Vec<Shape> = inputs.iter().map(|v| val(v).shape()).collect();
                let parts = layout::concat_backward(&shapes, g);
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { input, start } => vec![(
                *input,
                layout::slice_backward(val(input).shape(), *start, out.shape().c(), g),
            )],
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Upsample { input } => {
                vec![(*input, layout::upsample_backward(val(input).shape(), g))]
            }
            Op::Downsample { input } => {
                vec![(*input, layout::downsample_backward(val(input).shape(), g))]
            }
            Op::SoftmaxChannels { input } => {
                vec![(*input, layout::softmax_channels_backward(out, g))]
            }
            Op::SumChannels { input } => {
                vec![(*input, layout::sum_channels_backward(val(input).shape(), g))]
            }
            Op::Sum { input, scale } => {
                let k = g[0] * *scale;
                vec![(*input, vec![k; val(input).numel()])]
            }
            Op::Bce { logits, targets, scale } => {
                let k = g[0] * *scale;
                let dx = val(logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (elementwise::sigmoid(x) - t) * k)
                    .collect();
                vec![(*logits, dx)]
            }
        }
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            Tensor::scalar(s),
            Op::Sum {
                input: x,
                scale: T::one(),
            },
        )
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::cast(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        self.push(
            Tensor::scalar(s),
            Op::Sum {
                input: x,
                scale: T::one() / n,
            },
        )
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { input: x, factor })
    }

    /// Binary cross-entropy with logits, summed and multiplied by `scale`.
    ///
    /// Targets are constants in `[0, 1]`; infinite logits are handled exactly
    /// when the target is 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, scale: T) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::Dimension(format!(
                "bce targets {} do not match logits {}",
                targets.shape(),
                x.shape()
            )));
        }
        let total: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| elementwise::bce_term(x, t))
            .sum();
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
                scale,
            },
        ))
    }
}
