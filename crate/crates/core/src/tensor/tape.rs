//! Operation tape and the reverse sweep.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for an operation defined outside the tape module
/// (convolution, batch normalization, losses).
pub trait BackwardRule<F: Real> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each entry of [`inputs`](Self::inputs), in order.
    /// `None` for inputs that need no gradient.
    fn backward(&self, ctx: &BackwardCtx<'_, F>, out: &Tensor<F>, grad_out: &[F]) -> Vec<Option<Vec<F>>>;
}

/// Read access to recorded values during the reverse sweep.
pub struct BackwardCtx<'a, F: Real> {
    nodes: &'a [Node<F>],
}

impl<F: Real> BackwardCtx<'_, F> {
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

pub(crate) enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Vec<F>),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    SliceRows { src: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    WeightedSum { weights: Var, values: Var },
    Custom(Box<dyn BackwardRule<F>>),
}

pub(crate) struct Node<F: Real> {
    pub(crate) value: Tensor<F>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<F>,
}

/// Records a forward computation so that [`Tape::backward`] can propagate
/// gradients to every leaf that requires them.
///
/// Nodes are stored in creation order, which is a topological order; the
/// reverse sweep visits each node once.
pub struct Tape<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    bound: Vec<Option<Var>>,
    bound_ids: Vec<(ParamId, Var)>,
    track_params: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            bound_ids: Vec::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters are bound as constants: no gradients are
    /// tracked anywhere. Used for inference.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter. Repeated binds of one parameter return the
    /// same variable, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let trainable = self.track_params && store.is_trainable(id);
        let v = self.leaf(store.get(id).clone(), trainable);
        self.bound[idx] = Some(v);
        self.bound_ids.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a bound parameter, if it was reached by the last sweep.
    pub fn param_grad(&self, id: ParamId) -> Option<&[F]> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.grad(v))
    }

    /// Parameters bound on this tape, in bind order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound_ids.iter().copied()
    }

    /// Register the output of a custom operation.
    pub fn custom(&mut self, value: Tensor<F>, rule: Box<dyn BackwardRule<F>>) -> Result<Var> {
        let requires_grad = rule.inputs().iter().any(|&v| self.requires_grad(v));
        let name = rule.name();
        self.push(name, value, requires_grad, Op::Custom(rule))
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<F>,
        requires_grad: bool,
        op: Op<F>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = &self.nodes[loss.0].value;
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(grad_out) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let ctx = BackwardCtx { nodes: &self.nodes };
            let contributions = super::ops::backward_op(&ctx, node, grad_out);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert!(var.0 < i, "tape is not topologically ordered");
                accumulate(&mut before[var.0], g);
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
