//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A `Graph` owns every intermediate value. Ops compute eagerly, record a
//! node, and return the node id. `backward` replays the tape in reverse and
//! returns a gradient for every recorded node — including post-softmax
//! attention matrices, which is what the explainability path consumes.

use super::ops;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

enum Op<F: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: F },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { xs: Vec<NodeId> },
    RowSoftmax { x: NodeId },
    CausalSoftmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<F>, inv_std: Tensor<F> },
    Embedding { table: NodeId, ids: Vec<usize> },
    DwConv { x: NodeId, kernel: NodeId, bias: NodeId },
    PwConv { x: NodeId, weight: NodeId, bias: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)>, probs: Tensor<F> },
    LogSoftmaxPick { logits: NodeId, row: usize, class: usize, probs: Tensor<F> },
    KlDiv { q: NodeId, label: Tensor<F> },
    Sum { x: NodeId },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Recorded computation. Single-writer: one thread records and runs
/// backward; the resulting tensors are plain values afterwards.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Gradient per node id, zero for nodes the output does not reach.
pub struct Gradients<F: Scalar> {
    grads: Vec<Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> &Tensor<F> {
        &self.grads[id]
    }

    /// Move a gradient out, replacing it with an empty placeholder. For
    /// hot paths that would otherwise clone large parameter gradients.
    pub fn take(&mut self, id: NodeId) -> Tensor<F> {
        std::mem::replace(&mut self.grads[id], Tensor::zeros(&[0]))
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> Result<NodeId> {
        let v = ops::scale(&self.nodes[x].value, factor)?;
        Ok(self.push(Op::Scale { x, factor }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::relu(&self.nodes[x].value);
        Ok(self.push(Op::Relu { x }, v))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::gelu(&self.nodes[x].value)?;
        Ok(self.push(Op::Gelu { x }, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Matmul { a, b }, v))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::transpose(&self.nodes[x].value)?;
        Ok(self.push(Op::Transpose { x }, v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(&self.nodes[x].value, &self.nodes[bias].value)?;
        Ok(self.push(Op::AddBias { x, bias }, v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = ops::slice_cols(&self.nodes[x].value, start, width)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor<F>> = xs.iter().map(|&id| &self.nodes[id].value).collect();
        let v = ops::concat_cols(&parts)?;
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, v))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::row_softmax(&self.nodes[x].value)?;
        Ok(self.push(Op::RowSoftmax { x }, v))
    }

    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::causal_softmax(&self.nodes[x].value)?;
        Ok(self.push(Op::CausalSoftmax { x }, v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, xhat, inv_std) =
            ops::layer_norm(&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, v))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = ops::embedding(&self.nodes[table].value, ids)?;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, v))
    }

    pub fn conv1d_depthwise(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::conv1d_depthwise(
            &self.nodes[x].value,
            &self.nodes[kernel].value,
            &self.nodes[bias].value,
        )?;
        Ok(self.push(Op::DwConv { x, kernel, bias }, v))
    }

    pub fn conv1d_pointwise(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::conv1d_pointwise(
            &self.nodes[x].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
        )?;
        Ok(self.push(Op::PwConv { x, weight, bias }, v))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let (v, probs) = ops::cross_entropy(&self.nodes[logits].value, targets)?;
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, v))
    }

    pub fn log_softmax_pick(&mut self, logits: NodeId, row: usize, class: usize) -> Result<NodeId> {
        let (v, probs) = ops::log_softmax_pick(&self.nodes[logits].value, row, class)?;
        Ok(self.push(Op::LogSoftmaxPick { logits, row, class, probs }, v))
    }

    /// KL(label ‖ q) against a fixed label distribution.
    pub fn kl_div(&mut self, label: Tensor<F>, q: NodeId) -> Result<NodeId> {
        let qv = &self.nodes[q].value;
        if label.shape() != qv.shape() {
            return Err(Error::shape("kl_div", format!("{:?} vs {:?}", label.shape(), qv.shape())));
        }
        let v = ops::kl_div(label.data(), qv.data())?;
        let v = Tensor::scalar(v)?;
        Ok(self.push(Op::KlDiv { q, label }, v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::sum_all(&self.nodes[x].value)?;
        Ok(self.push(Op::Sum { x }, v))
    }

    /// Reverse sweep from a scalar node. Every recorded node receives a
    /// gradient; nodes the output does not depend on get zeros. A graph can
    /// be differentiated once per recording.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if output >= self.nodes.len() {
            return Err(Error::InvalidArg(format!("node id {output} out of range")));
        }
        if !self.nodes[output].value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[output].value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[output] = Some(Tensor::scalar(F::one())?);

        for id in (0..=output).rev() {
            // Attention matrices are structurally lower triangular: the
            // masked entries are not free variables, so their gradient is
            // pinned to zero before the node's gradient is used anywhere.
            if matches!(self.nodes[id].op, Op::CausalSoftmax { .. }) {
                if let Some(g) = grads[id].as_mut() {
                    ops::mask_strict_upper(g);
                }
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(n);
        for (id, slot) in grads.into_iter().enumerate() {
            // Untouched slots are zero tensors and need no finite check.
            match slot {
                Some(g) => {
                    g.check_finite("backward")?;
                    out.push(g);
                }
                None => out.push(Tensor::zeros(self.nodes[id].value.shape())),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], id: NodeId, contribution: Tensor<F>) -> Result<()> {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::Mul { a, b } => {
                let da = ops::mul(g, &self.nodes[*b].value)?;
                let db = ops::mul(g, &self.nodes[*a].value)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::Scale { x, factor } => {
                Self::accumulate(grads, *x, ops::scale(g, *factor)?)?;
            }
            Op::Relu { x } => {
                let dx = ops::relu_backward(&self.nodes[*x].value, g);
                Self::accumulate(grads, *x, dx)?;
            }
            Op::Gelu { x } => {
                let dx = ops::gelu_backward(&self.nodes[*x].value, g);
                Self::accumulate(grads, *x, dx)?;
            }
            Op::Matmul { a, b } => {
                let da = ops::matmul(g, &ops::transpose(&self.nodes[*b].value)?)?;
                let db = ops::matmul(&ops::transpose(&self.nodes[*a].value)?, g)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::Transpose { x } => {
                Self::accumulate(grads, *x, ops::transpose(g)?)?;
            }
            Op::AddBias { x, bias } => {
                Self::accumulate(grads, *x, g.clone())?;
                Self::accumulate(grads, *bias, ops::col_sum(g))?;
            }
            Op::SliceCols { x, start } => {
                let src = &self.nodes[*x].value;
                let (s, d) = (src.shape()[0], src.shape()[1]);
                let width = g.shape()[1];
                let mut dx = vec![F::zero(); s * d];
                for i in 0..s {
                    dx[i * d + start..i * d + start + width].copy_from_slice(g.row(i));
                }
                Self::accumulate(grads, *x, Tensor::from_vec_unchecked(vec![s, d], dx))?;
            }
            Op::ConcatCols { xs } => {
                let s = g.shape()[0];
                let mut offset = 0;
                for &part in xs {
                    let w = self.nodes[part].value.shape()[1];
                    let mut dp = Vec::with_capacity(s * w);
                    for i in 0..s {
                        dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    Self::accumulate(grads, part, Tensor::from_vec_unchecked(vec![s, w], dp))?;
                    offset += w;
                }
            }
            Op::RowSoftmax { x } => {
                let dx = ops::row_softmax_backward(&self.nodes[id].value, g);
                Self::accumulate(grads, *x, dx)?;
            }
            Op::CausalSoftmax { x } => {
                let dx = ops::causal_softmax_backward(&self.nodes[id].value, g);
                Self::accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (dx, dgamma, dbeta) =
                    ops::layer_norm_backward(xhat, inv_std, &self.nodes[*gamma].value, g);
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *gamma, dgamma)?;
                Self::accumulate(grads, *beta, dbeta)?;
            }
            Op::Embedding { table, ids } => {
                let dt = ops::embedding_backward(self.nodes[*table].value.shape(), ids, g);
                Self::accumulate(grads, *table, dt)?;
            }
            Op::DwConv { x, kernel, bias } => {
                let (dx, dk, db) =
                    ops::conv1d_depthwise_backward(&self.nodes[*x].value, &self.nodes[*kernel].value, g);
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *kernel, dk)?;
                Self::accumulate(grads, *bias, db)?;
            }
            Op::PwConv { x, weight, bias } => {
                let (dx, dw, db) =
                    ops::conv1d_pointwise_backward(&self.nodes[*x].value, &self.nodes[*weight].value, g)?;
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *weight, dw)?;
                Self::accumulate(grads, *bias, db)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let dl = ops::cross_entropy_backward(
                    self.nodes[*logits].value.shape(),
                    targets,
                    probs,
                    g.data()[0],
                );
                Self::accumulate(grads, *logits, dl)?;
            }
            Op::LogSoftmaxPick { logits, row, class, probs } => {
                let dl = ops::log_softmax_pick_backward(
                    self.nodes[*logits].value.shape(),
                    *row,
                    *class,
                    probs,
                    g.data()[0],
                );
                Self::accumulate(grads, *logits, dl)?;
            }
            Op::KlDiv { q, label } => {
                let qv = &self.nodes[*q].value;
                let dq = ops::kl_div_backward(label.data(), qv.data(), qv.shape(), g.data()[0]);
                Self::accumulate(grads, *q, dq)?;
            }
            Op::Sum { x } => {
                let dx = Tensor::filled(self.nodes[*x].value.shape(), g.data()[0])?;
                Self::accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x^2 via mul; df/dx at x=3 is 6.
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::scalar(3.0).unwrap());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        // Rows of a softmax sum to 1, so d(sum)/dv = 0.
        let mut g = Graph::<f32>::new();
        let v = g.leaf(Tensor::from_vec(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let p = g.row_softmax(v).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        for &gv in grads.get(v).data() {
            assert!(gv.abs() < 1e-7, "got {gv}");
        }
    }

    #[test]
    fn unreached_nodes_get_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(2.0).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(a, a).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::scalar(1.0).unwrap());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
    }
}
