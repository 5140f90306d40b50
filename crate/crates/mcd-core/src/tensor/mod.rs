//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every forward op appends a node holding the
//! result buffer plus whatever the backward rule needs. Handles ([`Tensor`])
//! are plain indices into the tape. Calling [`Graph::backward`] on a scalar
//! root walks the tape in reverse creation order (which is already a reverse
//! topological order) and accumulates gradients into every node that
//! requires them. Leaf gradients persist across repeated backward calls;
//! intermediate gradients are scratch and reset per call.
//!
//! Buffers are contiguous row-major `Vec<S>` where `S` is `f32` in normal
//! operation and `f64` under gradient checking.

pub mod conv;
pub mod elementwise;
pub mod index;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod reduce;
pub mod resample;
pub mod scan;
pub mod shape_ops;

use std::collections::HashMap;

use crate::error::{McdError, Result};
use crate::params::ParamId;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful together
/// with the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Ln,
    Neg,
    Sigmoid,
    Silu,
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Backward recipe for one node. Saved activations live inline.
#[derive(Debug, Default)]
pub(crate) enum Op<S> {
    #[default]
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
    },
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Flip {
        x: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    ReduceMean {
        x: usize,
        axis: usize,
    },
    ReduceMax {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Upsample2d {
        x: usize,
        factor: usize,
        mode: UpsampleMode,
    },
    /// Fused selective scan; `h` is the saved state trajectory [B,L,D,N].
    Scan {
        a_bar: usize,
        bx: usize,
        c: usize,
        h: Vec<S>,
    },
    CrossEntropy2 {
        logits: usize,
        labels: Vec<u8>,
    },
    SumAll {
        x: usize,
    },
}

pub(crate) struct Node<S> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
    pub op: Op<S>,
}

impl<S> Node<S> {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

/// Reverse-mode tape. Build one per forward pass and drop it afterwards;
/// persistent state (parameters, optimizer moments) lives outside.
pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    /// Parameters staged into this graph, so a parameter used twice (the
    /// Siamese branches) maps to one node and its gradients sum naturally.
    staged: HashMap<usize, Tensor>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            staged: HashMap::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<S>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), index::numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if data.len() != index::numel(shape) {
            return Err(McdError::ShapeMismatch {
                context: "leaf".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<S>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![S::from_f64(v)], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        self.push(
            vec![S::zero(); index::numel(shape)],
            shape.to_vec(),
            false,
            Op::Leaf,
        )
    }

    /// Stage a parameter as a gradient-tracking leaf. Staging the same id
    /// twice returns the first node unchanged.
    pub fn param(&mut self, store: &crate::params::ParamStore<S>, id: ParamId) -> Tensor {
        if let Some(&t) = self.staged.get(&id.0) {
            return t;
        }
        let entry = store.entry(id);
        let t = self.push(
            entry.data.clone(),
            entry.shape.clone(),
            true,
            Op::Leaf,
        );
        self.staged.insert(id.0, t);
        t
    }

    /// Node the parameter was staged at, if it participated in this graph.
    pub fn staged_param(&self, id: ParamId) -> Option<Tensor> {
        self.staged.get(&id.0).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, t: Tensor) -> &[S] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[S]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn item(&self, t: Tensor) -> S {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    pub fn zero_grad(&mut self, t: Tensor) {
        self.nodes[t.0].grad = None;
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub(crate) fn add_to_grad(&mut self, id: usize, delta: &[S]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![S::zero(); node.data.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients of leaves accumulate
    /// across calls; everything else is recomputed per call.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(McdError::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        for node in self.nodes.iter_mut() {
            if !node.is_leaf() {
                node.grad = None;
            }
        }
        if self.nodes[root.0].requires_grad {
            let one = vec![S::one()];
            self.add_to_grad(root.0, &one);
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if self.nodes[i].is_leaf() {
                continue;
            }
            let op = std::mem::take(&mut self.nodes[i].op);
            self.backprop_node(i, &op);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<S>) {
        match op {
            Op::Leaf => {}
            Op::Unary { kind, x } => self.backward_unary(i, *kind, *x),
            Op::Binary { kind, a, b } => self.backward_binary(i, *kind, *a, *b),
            Op::Scale { x, c } => self.backward_scale(i, *x, *c),
            Op::Linear { x, w, bias } => self.backward_linear(i, *x, *w, *bias),
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                padding,
                groups,
            } => self.backward_conv2d(i, *x, *k, *bias, *stride, *padding, *groups),
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backward_layernorm(i, *x, *gamma, *beta, *eps)
            }
            Op::Reshape { x } => self.backward_reshape(i, *x),
            Op::Permute { x, perm } => self.backward_permute(i, *x, perm),
            Op::Flip { x, axis } => self.backward_flip(i, *x, *axis),
            Op::Concat { inputs, axis } => self.backward_concat(i, inputs, *axis),
            Op::Narrow { x, axis, start } => self.backward_narrow(i, *x, *axis, *start),
            Op::ReduceMean { x, axis } => self.backward_reduce_mean(i, *x, *axis),
            Op::ReduceMax { x, axis, argmax } => self.backward_reduce_max(i, *x, *axis, argmax),
            Op::Upsample2d { x, factor, mode } => self.backward_upsample2d(i, *x, *factor, *mode),
            Op::Scan { a_bar, bx, c, h } => self.backward_scan(i, *a_bar, *bx, *c, h),
            Op::CrossEntropy2 { logits, labels } => self.backward_cross_entropy2(i, *logits, labels),
            Op::SumAll { x } => self.backward_sum_all(i, *x),
        }
    }
}
