use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Atan,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise minimum; ties route the gradient to the left operand.
    Min,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// One binary cross-entropy term for a logit `x` and target `t`.
pub(crate) fn bce_term<T: Real>(x: T, t: T) -> T {
    if t == T::one() {
        softplus(-x)
    } else if t == T::zero() {
        softplus(x)
    } else {
        t * softplus(-x) + (T::one() - t) * softplus(x)
    }
}

fn unary_forward<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Atan => x.atan(),
        UnaryKind::Square => x * x,
    }
}

pub(crate) fn unary_backward<T: Real>(kind: UnaryKind, x: &[T], y: &[T], dy: &[T]) -> Vec<T> {
    let one = T::one();
    x.iter()
        .zip(y)
        .zip(dy)
        .map(|((&x, &y), &g)| {
            g * match kind {
                UnaryKind::Sigmoid => y * (one - y),
                UnaryKind::Silu => {
                    let s = sigmoid(x);
                    s * (one + x * (one - s))
                }
                UnaryKind::Relu => {
                    if x > T::zero() {
                        one
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Softplus => sigmoid(x),
                UnaryKind::Atan => one / (one + x * x),
                UnaryKind::Square => x + x,
            }
        })
        .collect()
}

pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a.0[i], b.0[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {a} with {b}")),
        };
    }
    Ok(Shape(out))
}

fn strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s.c() * s.hw(), s.hw(), s.w(), 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s.0[i] == out.0[i] { full[i] } else { 0 };
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides(a, out);
    let sb = strides(b, out);
    let mut o = 0;
    for n in 0..out.n() {
        for c in 0..out.c() {
            for h in 0..out.h() {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w() {
                    f(o, ia + w * sa[3], ib + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn binary_op<T: Real>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
        BinaryKind::Min => {
            if x <= y {
                x
            } else {
                y
            }
        }
        BinaryKind::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    }
}

pub(crate) fn binary_backward<T: Real>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: Shape,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), out, |o, ia, ib| {
        let g = dy[o];
        let (x, y) = (ad[ia], bd[ib]);
        match kind {
            BinaryKind::Add => {
                da[ia] += g;
                db[ib] += g;
            }
            BinaryKind::Sub => {
                da[ia] += g;
                db[ib] -= g;
            }
            BinaryKind::Mul => {
                da[ia] += g * y;
                db[ib] += g * x;
            }
            BinaryKind::Div => {
                da[ia] += g / y;
                db[ib] -= g * x / (y * y);
            }
            BinaryKind::Min => {
                if x <= y {
                    da[ia] += g;
                } else {
                    db[ib] += g;
                }
            }
            BinaryKind::Max => {
                if x >= y {
                    da[ia] += g;
                } else {
                    db[ib] += g;
                }
            }
        }
    });
    (da, db)
}

impl<T: Real> Tape<T> {
    pub fn unary(&mut self, input: Var, kind: UnaryKind) -> Var {
        let out = self.value(input).map(|v| unary_forward(kind, v));
        self.push(out, Op::Unary { input, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    /// Elementwise binary operation with broadcasting over unit extents.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); out_shape.numel()];
        let (ad, bd) = (ta.data(), tb.data());
        for_each_broadcast(ta.shape(), tb.shape(), out_shape, |o, ia, ib| {
            out[o] = binary_op(kind, ad[ia], bd[ib]);
        });
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }
}
