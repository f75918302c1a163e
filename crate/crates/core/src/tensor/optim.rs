use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter {
    /// Slash-separated path, used as the checkpoint record name.
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
    pub momentum: Tensor<f32>,
    /// Frozen parameters enter graphs as constants.
    pub frozen: bool,
}

/// Owner of every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let momentum = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            momentum,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<f32>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Gives every trainable parameter without a gradient a zero gradient,
    /// so decay and momentum still apply to heads that saw no samples.
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen && p.grad.is_none()) {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One SGD step with momentum and L2 weight decay over all trainable
/// parameters, then clears the gradients:
///
/// `buf = momentum * buf + grad + weight_decay * param; param -= lr * buf`
pub fn sgd_step(store: &mut ParamStore, cfg: SgdConfig) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    for p in store.params.iter_mut().filter(|p| !p.frozen) {
        let grad = p.grad.take().expect("checked above");
        let buf = p.momentum.data_mut();
        let val = p.value.data_mut();
        for ((b, v), &g) in buf.iter_mut().zip(val.iter_mut()).zip(grad.data()) {
            *b = cfg.momentum * *b + g + cfg.weight_decay * *v;
            *v -= cfg.lr * *b;
        }
    }
    store.zero_grads();
    Ok(())
}
