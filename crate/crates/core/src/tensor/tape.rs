use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Vector-Jacobian product of one recorded operator.
///
/// `grad_out` has the output's length. The result holds one entry per input,
/// in input order; entries for inputs with `needs[i] == false` may be `None`.
pub trait Backward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<Box<dyn Backward<T>>>,
}

/// Define-by-run record of executed operators.
///
/// Nodes are appended in execution order, so every record's inputs precede it
/// and a reverse sweep is a valid topological traversal.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    differentiated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (a parameter or a probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} does not belong to this tape",
                v.id
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.id].requires_grad
    }

    /// Appends an operator result. The backward closure is kept only when at
    /// least one input is differentiable.
    pub fn record<B: Backward<T> + 'static>(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: B,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "operator `{op}` produced a non-finite value"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as Box<dyn Backward<T>>),
        });
        Ok(Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        })
    }

    /// Propagates d(loss)/d(node) to every differentiable node reachable
    /// from `loss`. A tape can be differentiated once until [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        self.check(loss).map_err(|_| {
            Error::Usage("backward on a tensor that was not produced by this tape".into())
        })?;
        if self.differentiated {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let shape = self.nodes[loss.id].value.shape();
        if shape != Shape::scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a (1,1,1,1) loss, got {shape}"
            )));
        }
        self.differentiated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(vec![T::one()]);

        for i in (0..=loss.id).rev() {
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect();
                let input_grads = bw.backward(&inputs, &node.value, &grad_out, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                for ((&j, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(g), true) = (g, need) else { continue };
                    debug_assert_eq!(g.len(), self.nodes[j].value.numel(), "{}", node.op);
                    match &mut self.grads[j] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(grad_out);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`; `None` when `v` is not
    /// on any differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.id {
            return None;
        }
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.id].value.shape(), g.clone()).expect("grad matches value"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    /// Operator names in execution order (leaves included).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op).collect()
    }
}
