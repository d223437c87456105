use std::sync::Arc;

use super::ops_elementwise::{self, Unary};
use super::{ops_image, ops_linalg, ops_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded primitive together with whatever its backward pass needs.
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Unary(Var, Unary),
    ClampMin(Var, T),
    Lerp(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Arc<[u32]>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        k: usize,
        cols: Vec<T>,
    },
    Depthwise {
        x: Var,
        w: Var,
        pad: usize,
        k: usize,
    },
    Resize(Var),
    BoxFilter {
        x: Var,
        radius: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBcast(a, b) | MulBcast(a, b)
            | MulCol(a, b) | MulScalar(a, b) => vec![*a, *b],
            Scale(a, _) | AddConst(a) | Unary(a, _) | ClampMin(a, _) | Sum(a) | Mean(a)
            | MeanRows(a) | SumLast(a) | Softmax(a) | Reshape(a) | Resize(a) => vec![*a],
            Lerp(a, b, t) => vec![*a, *b, *t],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, .. }
            | Standardize { x, .. }
            | Permute { x, .. }
            | Slice { x, .. }
            | Gather { x, .. }
            | BoxFilter { x, .. } => vec![*x],
            Concat(parts) => parts.clone(),
            Conv2d { x, w, .. } | Depthwise { x, w, .. } => vec![*x, *w],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            AddBcast(..) => "add_bcast",
            MulBcast(..) => "mul_bcast",
            MulCol(..) => "mul_col",
            MulScalar(..) => "mul_scalar",
            Scale(..) => "scale",
            AddConst(..) => "add_const",
            Unary(_, u) => u.name(),
            ClampMin(..) => "clamp_min",
            Lerp(..) => "lerp",
            Sum(..) => "sum",
            Mean(..) => "mean",
            MeanRows(..) => "mean_rows",
            SumLast(..) => "sum_last",
            MatMul { .. } => "matmul",
            BatchMatMul { .. } => "batch_matmul",
            Softmax(..) => "softmax",
            LayerNorm { .. } => "layer_norm",
            Standardize { .. } => "standardize",
            Reshape(..) => "reshape",
            Permute { .. } => "permute",
            Concat(..) => "concat",
            Slice { .. } => "slice",
            Gather { .. } => "gather",
            Conv2d { .. } => "conv2d",
            Depthwise { .. } => "depthwise_conv2d",
            Resize(..) => "resize_bilinear",
            BoxFilter { .. } => "box_filter",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Linear record of every primitive evaluated during a forward pass.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction and backward is a single reverse sweep.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a differentiable leaf (a learnable parameter or a probe point).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let seed = Tensor::full(self.shape(output), T::one());
        if seed.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("implicit seed needs a scalar output, got {:?}", self.shape(output)),
            ));
        }
        self.backward_with_seed(output, &seed)
    }

    /// Reverse sweep with an explicit output cotangent.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut buf = GradBuf {
            grads: (0..=output.0).map(|_| None).collect(),
            nodes: &self.nodes,
        };
        buf.grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = buf.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut buf);
            if !gout.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                });
            }
            buf.grads[i] = Some(gout);
        }
        let grads = buf
            .grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gout: &[T], buf: &mut GradBuf<'_, T>) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => ops_elementwise::add_backward(*a, *b, gout, buf),
            Op::Sub(a, b) => ops_elementwise::sub_backward(*a, *b, gout, buf),
            Op::Mul(a, b) => ops_elementwise::mul_backward(*a, *b, gout, buf),
            Op::Div(a, b) => ops_elementwise::div_backward(*a, *b, out, gout, buf),
            Op::AddBcast(a, b) => ops_elementwise::add_bcast_backward(*a, *b, gout, buf),
            Op::MulBcast(a, b) => ops_elementwise::mul_bcast_backward(*a, *b, gout, buf),
            Op::MulCol(a, b) => ops_elementwise::mul_col_backward(*a, *b, gout, buf),
            Op::MulScalar(a, s) => ops_elementwise::mul_scalar_backward(*a, *s, gout, buf),
            Op::Scale(a, s) => ops_elementwise::scale_backward(*a, *s, gout, buf),
            Op::AddConst(a) => ops_elementwise::add_backward_single(*a, gout, buf),
            Op::Unary(a, u) => ops_elementwise::unary_backward(*a, *u, out, gout, buf),
            Op::ClampMin(a, lo) => ops_elementwise::clamp_min_backward(*a, *lo, gout, buf),
            Op::Lerp(a, b, t) => ops_elementwise::lerp_backward(*a, *b, *t, gout, buf),
            Op::Sum(a) => ops_elementwise::sum_backward(*a, T::one(), gout, buf),
            Op::Mean(a) => {
                let n = buf.len_of(*a);
                ops_elementwise::sum_backward(*a, T::one() / super::c(n as f64), gout, buf)
            }
            Op::MeanRows(a) => ops_elementwise::mean_rows_backward(*a, gout, buf),
            Op::SumLast(a) => ops_elementwise::sum_last_backward(*a, gout, buf),
            Op::MatMul { a, b, ta, tb } => {
                ops_linalg::matmul_backward(*a, *b, *ta, *tb, gout, buf)
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                ops_linalg::bmm_backward(*a, *b, *ta, *tb, gout, buf)
            }
            Op::Softmax(a) => ops_linalg::softmax_backward(*a, out, gout, buf),
            Op::LayerNorm { x, inv_std } => {
                ops_linalg::layer_norm_backward(*x, out, inv_std, gout, buf)
            }
            Op::Standardize { x, inv_std } => {
                ops_linalg::standardize_backward(*x, out, inv_std, gout, buf)
            }
            Op::Reshape(a) => ops_elementwise::add_backward_single(*a, gout, buf),
            Op::Permute { x, axes } => ops_shape::permute_backward(*x, axes, gout, buf),
            Op::Concat(parts) => ops_shape::concat_backward(parts, out, gout, buf),
            Op::Slice { x, start } => ops_shape::slice_backward(*x, *start, out, gout, buf),
            Op::Gather { x, index } => ops_shape::gather_backward(*x, index, gout, buf),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                k,
                cols,
            } => ops_image::conv2d_backward(*x, *w, *stride, *pad, *k, cols, out, gout, buf),
            Op::Depthwise { x, w, pad, k } => {
                ops_image::depthwise_backward(*x, *w, *pad, *k, out, gout, buf)
            }
            Op::Resize(x) => ops_image::resize_backward(*x, out, gout, buf),
            Op::BoxFilter { x, radius } => ops_image::box_filter_backward(*x, *radius, gout, buf),
        }
    }
}

/// Gradient accumulator handed to per-op backward rules.
pub(crate) struct GradBuf<'a, T> {
    grads: Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<'a, T: Real> GradBuf<'a, T> {
    /// Mutable gradient slot of `v`, or `None` when no gradient is needed.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        let nodes: &'a [Node<T>] = self.nodes;
        &nodes[v.0].value
    }

    pub(crate) fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Result of a backward sweep: one optional gradient per recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; `None` when `v` does not influence the output
    /// through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
