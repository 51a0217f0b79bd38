//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Forward values are computed with the same kernels as the pure matrix API,
//! so recording adds no numeric difference. A tape is single-writer: record a
//! computation, call [`Tape::backward`] once, read gradients out.

use super::matrix::{
    gelu_derivative, mse, softmax_cross_entropy, BroadcastShape, DenseMatrix, Scalar,
};
use crate::error::{Error, Result};

/// Handle to a value stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Node<T> {
    MatMul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    BroadcastMul {
        a: ValueId,
        b: ValueId,
        shape: BroadcastShape,
        out: ValueId,
    },
    AddBroadcast {
        a: ValueId,
        b: ValueId,
        shape: BroadcastShape,
        out: ValueId,
    },
    Transpose {
        a: ValueId,
        out: ValueId,
    },
    Relu {
        a: ValueId,
        out: ValueId,
    },
    Gelu {
        a: ValueId,
        out: ValueId,
    },
    RowSoftmax {
        a: ValueId,
        out: ValueId,
    },
    Slice {
        a: ValueId,
        row0: usize,
        col0: usize,
        out: ValueId,
    },
    ConcatCols {
        parts: Vec<ValueId>,
        out: ValueId,
    },
    SplitTokens {
        a: ValueId,
        tokens: usize,
        dim: usize,
        out: ValueId,
    },
    MergeTokens {
        a: ValueId,
        tokens: usize,
        dim: usize,
        out: ValueId,
    },
    Scale {
        a: ValueId,
        factor: T,
        out: ValueId,
    },
    Sum {
        a: ValueId,
        out: ValueId,
    },
    Mean {
        a: ValueId,
        out: ValueId,
    },
    Mse {
        pred: ValueId,
        target: ValueId,
        out: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        out: ValueId,
    },
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T> {
    values: Vec<DenseMatrix<T>>,
    trainable: Vec<bool>,
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by tape value id. Only trainable values carry an entry;
/// a trainable value the loss never touched reports a zero matrix.
#[derive(Debug)]
pub struct GradientMap<T> {
    grads: Vec<Option<DenseMatrix<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: ValueId) -> Option<&DenseMatrix<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            trainable: Vec::new(),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: DenseMatrix<T>, trainable: bool) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(value);
        self.trainable.push(trainable);
        id
    }

    /// Register a trainable leaf. The tape stores its own copy.
    pub fn param(&mut self, value: DenseMatrix<T>) -> ValueId {
        self.push(value, true)
    }

    /// Register a frozen leaf; it receives no gradient entry.
    pub fn constant(&mut self, value: DenseMatrix<T>) -> ValueId {
        self.push(value, false)
    }

    pub fn value(&self, id: ValueId) -> &DenseMatrix<T> {
        &self.values[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        let out = self.push(value, false);
        self.nodes.push(Node::MatMul { a, b, out });
        Ok(out)
    }

    pub fn broadcast_mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.values[a.0].broadcast_shape(&self.values[b.0], "broadcast_mul")?;
        let value = self.values[a.0].broadcast_mul(&self.values[b.0])?;
        let out = self.push(value, false);
        self.nodes.push(Node::BroadcastMul { a, b, shape, out });
        Ok(out)
    }

    pub fn add_broadcast(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.values[a.0].broadcast_shape(&self.values[b.0], "add_broadcast")?;
        let value = self.values[a.0].add_broadcast(&self.values[b.0])?;
        let out = self.push(value, false);
        self.nodes.push(Node::AddBroadcast { a, b, shape, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let value = self.values[a.0].transpose();
        let out = self.push(value, false);
        self.nodes.push(Node::Transpose { a, out });
        out
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.values[a.0].relu();
        let out = self.push(value, false);
        self.nodes.push(Node::Relu { a, out });
        out
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let value = self.values[a.0].gelu();
        let out = self.push(value, false);
        self.nodes.push(Node::Gelu { a, out });
        out
    }

    pub fn row_softmax(&mut self, a: ValueId) -> ValueId {
        let value = self.values[a.0].row_softmax();
        let out = self.push(value, false);
        self.nodes.push(Node::RowSoftmax { a, out });
        out
    }

    pub fn slice(
        &mut self,
        a: ValueId,
        row0: usize,
        n_rows: usize,
        col0: usize,
        n_cols: usize,
    ) -> Result<ValueId> {
        let value = self.values[a.0].slice(row0, n_rows, col0, n_cols)?;
        let out = self.push(value, false);
        self.nodes.push(Node::Slice { a, row0, col0, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mats: Vec<&DenseMatrix<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let value = DenseMatrix::concat_cols(&mats)?;
        let out = self.push(value, false);
        self.nodes.push(Node::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn split_tokens(&mut self, a: ValueId, tokens: usize, dim: usize) -> Result<ValueId> {
        let value = self.values[a.0].split_tokens(tokens, dim)?;
        let out = self.push(value, false);
        self.nodes.push(Node::SplitTokens {
            a,
            tokens,
            dim,
            out,
        });
        Ok(out)
    }

    pub fn merge_tokens(&mut self, a: ValueId, tokens: usize, dim: usize) -> Result<ValueId> {
        let value = self.values[a.0].merge_tokens(tokens, dim)?;
        let out = self.push(value, false);
        self.nodes.push(Node::MergeTokens {
            a,
            tokens,
            dim,
            out,
        });
        Ok(out)
    }

    pub fn scale(&mut self, a: ValueId, factor: T) -> ValueId {
        let value = self.values[a.0].scale(factor);
        let out = self.push(value, false);
        self.nodes.push(Node::Scale { a, factor, out });
        out
    }

    /// Sum of all elements, as a 1x1 value.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = self.values[a.0].sum();
        let out = self.push(DenseMatrix::from_rows(&[&[s]]), false);
        self.nodes.push(Node::Sum { a, out });
        out
    }

    /// Mean of all elements, as a 1x1 value.
    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let m = self.values[a.0].mean();
        let out = self.push(DenseMatrix::from_rows(&[&[m]]), false);
        self.nodes.push(Node::Mean { a, out });
        out
    }

    /// Mean-squared error against a target held on the tape.
    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        let l = mse(&self.values[pred.0], &self.values[target.0])?;
        let out = self.push(DenseMatrix::from_rows(&[&[l]]), false);
        self.nodes.push(Node::Mse { pred, target, out });
        Ok(out)
    }

    /// Mean softmax cross-entropy; classes are rows, samples are columns.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let l = softmax_cross_entropy(&self.values[logits.0], labels)?;
        let out = self.push(DenseMatrix::from_rows(&[&[l]]), false);
        self.nodes.push(Node::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Gradient of a scalar loss with respect to every trainable value,
    /// accumulated over the tape in exact reverse execution order.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap<T>> {
        let loss_value = &self.values[loss.0];
        if loss_value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }

        let mut adjoint: Vec<Option<DenseMatrix<T>>> = vec![None; self.values.len()];
        adjoint[loss.0] = Some(DenseMatrix::from_rows(&[&[T::one()]]));

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut adjoint)?;
        }

        let grads = adjoint
            .into_iter()
            .enumerate()
            .map(|(i, adj)| {
                if self.trainable[i] {
                    Some(adj.unwrap_or_else(|| {
                        DenseMatrix::zeros(self.values[i].rows(), self.values[i].cols())
                    }))
                } else {
                    None
                }
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<DenseMatrix<T>>],
        id: ValueId,
        delta: DenseMatrix<T>,
    ) -> Result<()> {
        match &mut adjoint[id.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Reduce a full-size upstream gradient back to the broadcast operand's
    /// shape by summing over the expanded axes.
    fn reduce_to_shape(full: &DenseMatrix<T>, shape: BroadcastShape) -> DenseMatrix<T> {
        match shape {
            BroadcastShape::Full => full.clone(),
            BroadcastShape::Scalar => DenseMatrix::from_rows(&[&[full.sum()]]),
            BroadcastShape::Column => DenseMatrix::from_fn(full.rows(), 1, |i, _| {
                let mut acc = T::zero();
                for j in 0..full.cols() {
                    acc = acc + full.get(i, j);
                }
                acc
            }),
        }
    }

    fn backward_node(&self, node: &Node<T>, adjoint: &mut [Option<DenseMatrix<T>>]) -> Result<()> {
        match node {
            Node::MatMul { a, b, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let d_a = d_out.matmul(&self.values[b.0].transpose())?;
                self.accumulate(adjoint, *a, d_a)?;
                let d_b = self.values[a.0].transpose().matmul(&d_out)?;
                self.accumulate(adjoint, *b, d_b)?;
            }
            Node::BroadcastMul { a, b, shape, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let d_a = d_out.broadcast_mul(&self.values[b.0])?;
                self.accumulate(adjoint, *a, d_a)?;
                let d_b_full = d_out.broadcast_mul(&self.values[a.0])?;
                self.accumulate(adjoint, *b, Self::reduce_to_shape(&d_b_full, *shape))?;
            }
            Node::AddBroadcast { a, b, shape, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                self.accumulate(adjoint, *a, d_out.clone())?;
                self.accumulate(adjoint, *b, Self::reduce_to_shape(&d_out, *shape))?;
            }
            Node::Transpose { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                self.accumulate(adjoint, *a, d_out.transpose())?;
            }
            Node::Relu { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let input = &self.values[a.0];
                let d_a = DenseMatrix::from_fn(input.rows(), input.cols(), |i, j| {
                    if input.get(i, j) > T::zero() {
                        d_out.get(i, j)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(adjoint, *a, d_a)?;
            }
            Node::Gelu { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let input = &self.values[a.0];
                let d_a = DenseMatrix::from_fn(input.rows(), input.cols(), |i, j| {
                    d_out.get(i, j) * gelu_derivative(input.get(i, j))
                });
                self.accumulate(adjoint, *a, d_a)?;
            }
            Node::RowSoftmax { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let y = &self.values[out.0];
                let mut d_a = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let mut dot = T::zero();
                    for j in 0..y.cols() {
                        dot = dot + d_out.get(i, j) * y.get(i, j);
                    }
                    for j in 0..y.cols() {
                        d_a.set(i, j, y.get(i, j) * (d_out.get(i, j) - dot));
                    }
                }
                self.accumulate(adjoint, *a, d_a)?;
            }
            Node::Slice { a, row0, col0, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let source = &self.values[a.0];
                let mut d_a = DenseMatrix::zeros(source.rows(), source.cols());
                for i in 0..d_out.rows() {
                    for j in 0..d_out.cols() {
                        d_a.set(row0 + i, col0 + j, d_out.get(i, j));
                    }
                }
                self.accumulate(adjoint, *a, d_a)?;
            }
            Node::ConcatCols { parts, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let mut base = 0usize;
                for part in parts {
                    let cols = self.values[part.0].cols();
                    let d_part = d_out.slice(0, d_out.rows(), base, cols)?;
                    self.accumulate(adjoint, *part, d_part)?;
                    base += cols;
                }
            }
            Node::SplitTokens {
                a,
                tokens,
                dim,
                out,
            } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                self.accumulate(adjoint, *a, d_out.merge_tokens(*tokens, *dim)?)?;
            }
            Node::MergeTokens {
                a,
                tokens,
                dim,
                out,
            } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                self.accumulate(adjoint, *a, d_out.split_tokens(*tokens, *dim)?)?;
            }
            Node::Scale { a, factor, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                self.accumulate(adjoint, *a, d_out.scale(*factor))?;
            }
            Node::Sum { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let g = d_out.get(0, 0);
                let source = &self.values[a.0];
                self.accumulate(
                    adjoint,
                    *a,
                    DenseMatrix::from_fn(source.rows(), source.cols(), |_, _| g),
                )?;
            }
            Node::Mean { a, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let source = &self.values[a.0];
                let g = d_out.get(0, 0) / T::of_f64(source.len() as f64);
                self.accumulate(
                    adjoint,
                    *a,
                    DenseMatrix::from_fn(source.rows(), source.cols(), |_, _| g),
                )?;
            }
            Node::Mse { pred, target, out } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let p = &self.values[pred.0];
                let t = &self.values[target.0];
                let k = d_out.get(0, 0) * T::of_f64(2.0 / p.len() as f64);
                let d_pred = DenseMatrix::from_fn(p.rows(), p.cols(), |i, j| {
                    k * (p.get(i, j) - t.get(i, j))
                });
                let d_target = d_pred.scale(-T::one());
                self.accumulate(adjoint, *pred, d_pred)?;
                self.accumulate(adjoint, *target, d_target)?;
            }
            Node::SoftmaxCrossEntropy {
                logits,
                labels,
                out,
            } => {
                let Some(d_out) = adjoint[out.0].clone() else {
                    return Ok(());
                };
                let z = &self.values[logits.0];
                let k = d_out.get(0, 0) / T::of_f64(labels.len() as f64);
                let mut d_z = DenseMatrix::zeros(z.rows(), z.cols());
                for (j, &label) in labels.iter().enumerate() {
                    let mut max = T::neg_infinity();
                    for i in 0..z.rows() {
                        max = max.max(z.get(i, j));
                    }
                    let mut denom = T::zero();
                    for i in 0..z.rows() {
                        denom = denom + (z.get(i, j) - max).exp();
                    }
                    for i in 0..z.rows() {
                        let p = (z.get(i, j) - max).exp() / denom;
                        let delta = if i == label { T::one() } else { T::zero() };
                        d_z.set(i, j, k * (p - delta));
                    }
                }
                self.accumulate(adjoint, *logits, d_z)?;
            }
        }
        Ok(())
    }
}
