use super::optim::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
pub(crate) trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adds the contribution of `grad_out` to the gradients of the op inputs.
    fn backward(&self, graph: &Graph<T>, out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>);
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Option<Box<dyn Backward<T>>>,
    op_name: &'static str,
    requires_grad: bool,
    label: Option<String>,
    param: Option<ParamId>,
}

/// The tape: every op appends one node, backward replays them in reverse.
///
/// A graph is owned by a single training step (or inference call) and
/// dropped afterwards.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    no_grad: bool,
    first_nonfinite: Option<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: false,
            first_nonfinite: None,
        }
    }

    /// A graph that records values only. Parameters enter as constants and
    /// no backward rules are kept.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, None, "leaf", requires_grad && !self.no_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    pub fn label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Error describing the first node whose value contained NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(i) => {
                let node = &self.nodes[i];
                Err(Error::NonFinite {
                    op: node.op_name,
                    node: i,
                    label: node
                        .label
                        .as_ref()
                        .map(|l| format!(", `{l}`"))
                        .unwrap_or_default(),
                })
            }
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let name = op.name();
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push_node(value, op, name, requires_grad, None)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        op: Option<Box<dyn Backward<T>>>,
        op_name: &'static str,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            op_name,
            requires_grad,
            label: None,
            param,
        });
        Var(idx)
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", value.shape()),
            ));
        }
        let mut acc = GradAcc {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: acc.grads });
        }
        acc.grads[loss.0] = Some(Tensor::full(value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[i].op else { continue };
            let Some(grad) = acc.grads[i].take() else { continue };
            op.backward(self, Var(i), &grad, &mut acc);
            acc.grads[i] = Some(grad);
        }
        Ok(Gradients { grads: acc.grads })
    }
}

impl Graph<f32> {
    /// Places a model parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = !self.no_grad && !p.frozen;
        let v = self.push_node(p.value.clone(), None, "param", trainable, Some(id));
        self.nodes[v.0].label = Some(p.name.clone());
        v
    }

    /// Gradients of the parameter nodes, in tape order.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<f32>) -> Vec<(ParamId, &'g Tensor<f32>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| Some((node.param?, grads.grads[i].as_ref()?)))
            .collect()
    }

    /// Adds the gradients of every parameter node into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<f32>, store: &mut ParamStore) {
        for (id, g) in self.param_grads(grads) {
            store.accumulate_grad(id, g);
        }
    }
}

/// Gradient buffers being accumulated during a backward pass.
pub(crate) struct GradAcc<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Real> GradAcc<T> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable gradient buffer of `v`, zero-initialised on first use.
    pub fn buf(&mut self, v: Var, shape: &[usize]) -> &mut Tensor<T> {
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
