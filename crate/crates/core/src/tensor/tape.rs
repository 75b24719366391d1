//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Nodes are appended in execution order, so the node list is always a
//! topological order and the backward sweep is a single reverse pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::kernels::{self, UpsampleMode};
use super::{Scalar, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    AvgPool(usize),
    Upsample(usize, UpsampleMode),
    Concat(usize, usize),
    Add(usize, usize),
    Sum(usize),
    Dot(usize, Tensor<T>),
    Bce {
        input: usize,
        labels: Tensor<T>,
        pos_weight: T,
        neg_weight: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, rg)
    }

    /// Records a learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("var belongs to this tape")].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let out = kernels::conv3d_forward(
            &self.nodes[i].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        Ok(self.derived(
            out,
            Op::Conv3d {
                input: i,
                weight: w,
                bias: b,
            },
            &[i, w, b],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(|v| v.max(T::zero()));
        Ok(self.derived(out, Op::Relu(i), &[i]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(kernels::sigmoid);
        Ok(self.derived(out, Op::Sigmoid(i), &[i]))
    }

    pub fn avg_pool3d(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = kernels::avg_pool3d_forward(&self.nodes[i].value)?;
        Ok(self.derived(out, Op::AvgPool(i), &[i]))
    }

    pub fn upsample3d(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        let i = self.idx(input)?;
        let out = kernels::upsample3d_forward(&self.nodes[i].value, mode);
        Ok(self.derived(out, Op::Upsample(i, mode), &[i]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = kernels::concat_channels_forward(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.derived(out, Op::Concat(ia, ib), &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.derived(out, Op::Add(ia, ib), &[ia, ib]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let s = self.nodes[i].value.sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(i), &[i]))
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let i = self.idx(input)?;
        let v = &self.nodes[i].value;
        if v.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: v.shape(),
                right: weights.shape(),
            });
        }
        let s = v
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.derived(Tensor::scalar(s), Op::Dot(i, weights), &[i]))
    }

    /// Summed binary cross-entropy of logits against 0/1 labels. Positive
    /// voxels are scaled by `pos_weight`, negative ones by `neg_weight`.
    pub fn bce_with_logits(
        &mut self,
        input: Var,
        labels: Tensor<T>,
        pos_weight: T,
        neg_weight: T,
    ) -> Result<Var> {
        let i = self.idx(input)?;
        let a = &self.nodes[i].value;
        if a.shape() != labels.shape() {
            return Err(Error::ShapeMismatch {
                op: "output_loss",
                left: a.shape(),
                right: labels.shape(),
            });
        }
        if labels.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::NonBinaryLabels);
        }
        // Accumulate in f64 so the scalar loss is stable over large volumes.
        let total: f64 = a
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&a, &y)| {
                let wt = if y == T::one() { pos_weight } else { neg_weight };
                (wt * kernels::bce_with_logit(a, y)).as_f64()
            })
            .sum();
        Ok(self.derived(
            Tensor::scalar(T::from_f64(total)),
            Op::Bce {
                input: i,
                labels,
                pos_weight,
                neg_weight,
            },
            &[i],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every variable reachable from the
    /// loss gets its gradient; the rest read back as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        let ls = self.nodes[root].value.shape();
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(ls));

        for at in (0..=root).rev() {
            let Some(g) = grads[at].take() else { continue };
            let node = &self.nodes[at];
            if !node.requires_grad {
                continue;
            }
            let needs = |i: usize| self.nodes[i].requires_grad;
            let give = |i: usize, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                } => {
                    let wv = &self.nodes[*weight].value;
                    if needs(*input) {
                        give(*input, kernels::conv3d_backward_input(&g, wv), &mut grads);
                    }
                    if needs(*weight) || needs(*bias) {
                        let (gw, gb) = kernels::conv3d_backward_params(
                            &g,
                            &self.nodes[*input].value,
                            wv.shape(),
                        );
                        let gb = gb.reshape(self.nodes[*bias].value.shape())?;
                        if needs(*weight) {
                            give(*weight, gw, &mut grads);
                        }
                        if needs(*bias) {
                            give(*bias, gb, &mut grads);
                        }
                    }
                }
                Op::Relu(i) => {
                    let x = &self.nodes[*i].value;
                    let mut gi = g.clone();
                    for (gv, &xv) in gi.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    give(*i, gi, &mut grads);
                }
                Op::Sigmoid(i) => {
                    let mut gi = g.clone();
                    for (gv, &s) in gi.data_mut().iter_mut().zip(node.value.data()) {
                        *gv = *gv * s * (T::one() - s);
                    }
                    give(*i, gi, &mut grads);
                }
                Op::AvgPool(i) => give(*i, kernels::avg_pool3d_backward(&g), &mut grads),
                Op::Upsample(i, mode) => {
                    give(*i, kernels::upsample3d_backward(&g, *mode), &mut grads)
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.shape().c();
                    let cb = self.nodes[*b].value.shape().c();
                    let (ga, gb) = kernels::concat_channels_backward(&g, ca, cb);
                    if needs(*a) {
                        give(*a, ga, &mut grads);
                    }
                    if needs(*b) {
                        give(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        give(*a, g.clone(), &mut grads);
                    }
                    if needs(*b) {
                        give(*b, g.clone(), &mut grads);
                    }
                }
                Op::Sum(i) => {
                    let s = g.data()[0];
                    give(*i, Tensor::full(self.nodes[*i].value.shape(), s), &mut grads);
                }
                Op::Dot(i, wts) => {
                    let s = g.data()[0];
                    give(*i, wts.map(|v| v * s), &mut grads);
                }
                Op::Bce {
                    input,
                    labels,
                    pos_weight,
                    neg_weight,
                } => {
                    let s = g.data()[0];
                    let a = &self.nodes[*input].value;
                    let mut gi = Tensor::zeros(a.shape());
                    for ((gv, &av), &y) in gi.data_mut().iter_mut().zip(a.data()).zip(labels.data())
                    {
                        let wt = if y == T::one() { *pos_weight } else { *neg_weight };
                        *gv = s * wt * (kernels::sigmoid(av) - y);
                    }
                    give(*input, gi, &mut grads);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[at] = Some(g);
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

/// Result of a backward sweep, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "var from another tape");
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index]))
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(Shape::volume(2, 3, 4), |i| i[4] as f64));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(Shape::volume(2, 3, 4)));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(Shape::volume(2, 2, 2)));
        let y = tape.param(Tensor::ones(Shape::volume(2, 2, 2)));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y), Tensor::zeros(Shape::volume(2, 2, 2)));
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(Shape::volume(2, 2, 2)));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn rejects_loss_from_another_tape() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.param(Tensor::scalar(1.0));
        let _ = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::ForeignVar)));
        assert!(matches!(b.sum(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn disjoint_branches_are_independent() {
        let shape = Shape::volume(2, 2, 2);
        let xa = Tensor::from_fn(shape, |i| 0.1 * i[2] as f64 - 0.3 * i[4] as f64);
        let xb = Tensor::from_fn(shape, |i| 0.2 * i[3] as f64 + 0.05);

        let branch = |tape: &mut Tape<f64>, x: Var| {
            let s = tape.sigmoid(x).unwrap();
            tape.sum(s).unwrap()
        };

        let mut tape = Tape::new();
        let a = tape.param(xa.clone());
        let b = tape.param(xb.clone());
        let la = branch(&mut tape, a);
        let lb = branch(&mut tape, b);
        let total = tape.add(la, lb).unwrap();
        let g = tape.backward(total).unwrap();

        for (input, var) in [(xa, a), (xb, b)] {
            let mut solo = Tape::new();
            let v = solo.param(input);
            let l = branch(&mut solo, v);
            let gs = solo.backward(l).unwrap();
            assert_eq!(g.wrt(var), gs.wrt(v));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(Shape::volume(2, 2, 2)));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
    }
}
