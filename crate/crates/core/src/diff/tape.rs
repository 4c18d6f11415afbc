//! Define-by-run tape. Every primitive evaluates eagerly, appends a node and
//! later supplies its vector-Jacobian product during [`Tape::backward`].

use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`]: the differentiable tensor of
/// this engine. Values and gradients live on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written reverse pass. The forward value is
/// computed by the caller and handed to [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. `None`
    /// means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
    Softmax { axis: usize },
    Sum { axis: Option<usize> },
    NormalizeRows,
    Bilinear,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::NormalizeRows => "normalize_rows",
            Op::Bilinear => "bilinear_sample2d",
            Op::Custom(c) => c.name(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of primitive applications. Inputs of node `k` always have
/// indices `< k`, so the reverse pass is a single backwards sweep.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<_> = self.nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Tape").field("ops", &ops).field("backward_done", &self.backward_done).finish()
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, inputs, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(op), inputs.to_vec())
    }

    /// Reverse sweep from a scalar `loss`, populating gradients for every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape("backward", "loss is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[k].take() else { continue };
            let input_grads = {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                super::ops::vjp(&node.op, &inputs, &node.value, &g)
            };
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            self.grads[k] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }
}
