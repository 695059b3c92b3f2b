//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every value produced while building a loss: leaves
//! (constants and tracked parameters) and the primitive operations applied
//! to them, in recording order. [`Tape::backward`] replays the record in
//! exact reverse order, accumulating gradients keyed by [`ValueId`].
//! Parameters that never reach the loss get an exactly-zero gradient.

use crate::conv::{check_dims, conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity of a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddConst(ValueId, f64),
    Relu(ValueId),
    /// Sum of all elements, producing a scalar.
    Sum(ValueId),
    /// Weighted sum of all elements against a constant weight tensor.
    DotConst(ValueId, Tensor),
    /// Anisotropic total variation of the trailing two dimensions,
    /// summed over all leading dimensions.
    Tv(ValueId),
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Single-owner recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> ValueId {
        self.nodes.push(Node { op, value, tracked });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers an untracked leaf (input data); no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, false)
    }

    /// Registers a tracked leaf (parameter); `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].tracked
    }

    fn binary(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        let value = self.value(a).zip(self.value(b), f)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(op, value, tracked))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let value = self.value(a).map(|x| c * x);
        let tracked = self.tracked(a);
        self.push(Op::Scale(a, c), value, tracked)
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let value = self.value(a).map(|x| x + c);
        let tracked = self.tracked(a);
        self.push(Op::AddConst(a, c), value, tracked)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(|x| x.max(0.0));
        let tracked = self.tracked(a);
        self.push(Op::Relu(a), value, tracked)
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(Op::Sum(a), value, tracked)
    }

    /// `sum(a ⊙ weights)` with `weights` held constant (no gradient through them).
    pub fn dot_const(&mut self, a: ValueId, weights: Tensor) -> Result<ValueId> {
        if !self.value(a).same_shape(&weights) {
            return Err(Error::contract(format!(
                "dot_const shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                weights.shape()
            )));
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        let tracked = self.tracked(a);
        Ok(self.push(Op::DotConst(a, weights), Tensor::scalar(v), tracked))
    }

    /// Anisotropic total variation: `sum |forward dx| + |forward dy|` over the
    /// trailing two dimensions, summed across all leading dimensions. No
    /// wraparound; the last row/column contributes no forward difference.
    pub fn tv(&mut self, a: ValueId) -> Result<ValueId> {
        let (h, w) = tv_plane_dims(self.value(a))?;
        let planes = self.value(a).numel() / (h * w);
        let data = self.value(a).data();
        let mut total = 0.0;
        for pl in 0..planes {
            let plane = &data[pl * h * w..][..h * w];
            for y in 0..h {
                let row = &plane[y * w..y * w + w];
                for x in 0..w - 1 {
                    total += (row[x + 1] - row[x]).abs();
                }
                if y + 1 < h {
                    let below = &plane[(y + 1) * w..(y + 1) * w + w];
                    for x in 0..w {
                        total += (below[x] - row[x]).abs();
                    }
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Op::Tv(a), Tensor::scalar(total), tracked))
    }

    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let value = conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let tracked = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            value,
            tracked,
        ))
    }

    /// Runs the reverse sweep from a scalar loss. Returns gradients for every
    /// tracked leaf; leaves the loss never depended on get exact zeros.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        accumulate(&mut grads, loss, Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // A node's gradient is final once every later consumer has been
            // visited; take it out so inputs can be accumulated freely.
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.acc_if_tracked(&mut grads, *a, || g.clone());
                    self.acc_if_tracked(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if_tracked(&mut grads, *a, || g.clone());
                    self.acc_if_tracked(&mut grads, *b, || g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    self.acc_if_tracked(&mut grads, *a, || {
                        g.zip(self.value(*b), |u, y| u * y).expect("mul shapes")
                    });
                    self.acc_if_tracked(&mut grads, *b, || {
                        g.zip(self.value(*a), |u, x| u * x).expect("mul shapes")
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc_if_tracked(&mut grads, *a, || g.map(|v| c * v));
                }
                Op::AddConst(a, _) => {
                    self.acc_if_tracked(&mut grads, *a, || g.clone());
                }
                Op::Relu(a) => {
                    self.acc_if_tracked(&mut grads, *a, || {
                        g.zip(self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 })
                            .expect("relu shapes")
                    });
                }
                Op::Sum(a) => {
                    let up = g.data()[0];
                    self.acc_if_tracked(&mut grads, *a, || {
                        Tensor::filled(self.value(*a).shape(), up)
                    });
                }
                Op::DotConst(a, weights) => {
                    let up = g.data()[0];
                    self.acc_if_tracked(&mut grads, *a, || weights.map(|w| up * w));
                }
                Op::Tv(a) => {
                    let up = g.data()[0];
                    self.acc_if_tracked(&mut grads, *a, || tv_backward(self.value(*a), up));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let dims = check_dims(self.value(*input), self.value(*kernel), self.value(*bias))
                        .expect("conv dims validated at record time");
                    let (g_in, g_ker, g_bias) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        g.data(),
                        &dims,
                        self.tracked(*input),
                    );
                    if let Some(g_in) = g_in {
                        self.acc_if_tracked(&mut grads, *input, || g_in);
                    }
                    self.acc_if_tracked(&mut grads, *kernel, || g_ker);
                    self.acc_if_tracked(&mut grads, *bias, || g_bias);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc_if_tracked(
        &self,
        grads: &mut [Option<Tensor>],
        id: ValueId,
        delta: impl FnOnce() -> Tensor,
    ) {
        if self.tracked(id) {
            accumulate(grads, id, delta());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => {
            let t = std::mem::replace(t, Tensor::scalar(0.0));
            grads[id.0] = Some(t.zip(&delta, |a, b| a + b).expect("gradient shapes"));
        }
        slot @ None => *slot = Some(delta),
    }
}

fn tv_plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::contract(format!(
            "tv needs rank >= 2, got shape {s:?}"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "tv needs spatial extent >= 2, got {h}x{w}"
        )));
    }
    Ok((h, w))
}

fn tv_backward(a: &Tensor, upstream: f64) -> Tensor {
    let (h, w) = tv_plane_dims(a).expect("checked at record time");
    let planes = a.numel() / (h * w);
    let data = a.data();
    let mut grad = vec![0.0; a.numel()];
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..h {
            for x in 0..w - 1 {
                let s = sign(data[base + y * w + x + 1] - data[base + y * w + x]) * upstream;
                grad[base + y * w + x + 1] += s;
                grad[base + y * w + x] -= s;
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let s = sign(data[base + (y + 1) * w + x] - data[base + y * w + x]) * upstream;
                grad[base + (y + 1) * w + x] += s;
                grad[base + y * w + x] -= s;
            }
        }
    }
    Tensor::from_vec(a.shape().to_vec(), grad).expect("tv grad shape")
}

/// Gradients produced by [`Tape::backward`], keyed by the tracked leaf's
/// [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked leaf. `None` for untracked or
    /// non-leaf values.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}
