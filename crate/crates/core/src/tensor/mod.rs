//! Eager tape-based reverse-mode autodiff over `ndarray` arrays in f64.
//!
//! Every operation appends a node to the [`Tape`]; `backward` sweeps the tape
//! in reverse, which is a valid topological order because nodes only reference
//! earlier nodes.

mod ops;
pub mod gradcheck;

pub use ops::conv_output_size;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("zero-norm row {row} in row_l2_normalize (norm {norm:.3e} <= 1e-12)")]
    ZeroNormRow { row: usize, norm: f64 },
    #[error("batch of size {got} too small for {op} (need >= {need})")]
    BatchTooSmall {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("index {index} out of bounds for {op} with extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
    #[error("conv2d geometry invalid: input {h}x{w}, kernel {k}, stride {stride}, pad {pad}")]
    BadConvGeometry {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
}

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    ScaleConst(NodeId, f64),
    AddBiasRows(NodeId, NodeId),
    AddBiasChannels(NodeId, NodeId),
    MulMask(NodeId, ArrayD<f64>),
    SubConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    StandardizeCols(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    StackRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    RowL2Normalize(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherCols {
        x: NodeId,
        idx: Vec<usize>,
    },
    MulScalarNode(NodeId, NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    /// Auxiliary arrays captured at forward time for the backward pass
    /// (im2col buffers, normalized activations, softmax outputs, ...).
    saved: Vec<ArrayD<f64>>,
}

/// Append-only computation graph. Values are computed eagerly on push.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, if any path connected it to the root.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, zeros when the node did not influence the root.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().expect("empty node value")
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, saved: Vec<ArrayD<f64>>) -> NodeId {
        self.nodes.push(Node { value, op, saved });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Reverse-mode sweep from a scalar root back to the leaves.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let rv = &self.nodes[root].value;
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                got: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(rv.raw_dim(), 1.0));
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.accumulate_parents(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}
