use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, OpKind};
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
///
/// Carries the generation of the tape that created it, so handles from before
/// a [`Tape::reset`] (or from another tape) are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    generation: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node<T> {
    value: Tensor<T>,
    /// `None` for leaves and constants.
    op: Option<(OpKind, Vec<usize>)>,
    saved: Option<Vec<T>>,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in execution order, so
/// every op's inputs precede it.
pub struct Tape<T> {
    generation: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to each `requires_grad` leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Float> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            generation: NEXT_GENERATION.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops all recorded nodes. Previously issued [`Var`]s become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = NEXT_GENERATION.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            generation: self.generation,
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.generation != self.generation || var.id >= self.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(var.id)
    }

    /// Adds an input tensor. With `requires_grad` it becomes a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            op: None,
            saved: None,
            requires_grad,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let id = self.check(var).expect("var from this tape");
        &self.nodes[id].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.check(var).map(|id| self.nodes[id].requires_grad).unwrap_or(false)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Evaluates `kind` on `inputs`. The op is recorded for backward only if
    /// some input requires a gradient; otherwise the result is a constant.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let fwd = ops::forward(&kind, &values)?;
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let node = if requires_grad {
            Node {
                value: fwd.value,
                op: Some((kind, ids)),
                saved: fwd.saved,
                requires_grad: true,
            }
        } else {
            Node {
                value: fwd.value,
                op: None,
                saved: None,
                requires_grad: false,
            }
        };
        Ok(self.push(node))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Non-destructive: the tape is left intact and calling it again yields
    /// identical gradients. Every `requires_grad` leaf gets an entry, zero if
    /// the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let root = self.check(loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(loss_value.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some((kind, inputs)) = &node.op else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_values: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = ops::backward(kind, &input_values, &node.value, node.saved.as_deref(), &g, &needs);
            for (&input, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(id, g);
            }
        }
        Ok(GradientMap { grads: out })
    }

    // Convenience wrappers around `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMulNt, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute(axes.to_vec()), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::IndexSelect {
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::GatherRows { indices }, &[a])
    }

    pub fn expand(&mut self, a: Var, leading: &[usize]) -> Result<Var> {
        self.apply(OpKind::Expand(leading.to_vec()), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::Normalize { eps }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.apply(OpKind::Pow(p), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanAxis(axis), &[a])
    }
}
