//! Parameterised layers on top of the tape, and the per-pass context that
//! places each parameter on the tape once.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// One forward pass: a tape plus a read-only view of the parameters.
pub struct Ctx<'a> {
    pub g: Graph<f32>,
    store: &'a ParamStore,
    placed: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            placed: HashMap::new(),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx {
            g: Graph::inference(),
            store,
            placed: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape node of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.placed.get(&id) {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.placed.insert(id, v);
        v
    }
}

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    He,
    /// Zero-mean normal with the given standard deviation.
    Normal(f32),
}

pub(crate) fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<f32> {
    let std = match init {
        Init::He => (2.0 / fan_in.max(1) as f32).sqrt(),
        Init::Normal(s) => s,
    };
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Square-kernel convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng);
        Conv2d {
            weight: store.add(format!("{name}/weight"), w),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[out_ch])),
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.g.conv2d(x, w, Some(b), self.stride, self.padding())
    }

    /// Deformable variant sharing this layer's weights.
    pub fn forward_deformable(&self, ctx: &mut Ctx, x: Var, offsets: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.g.deformable_conv2d(x, w, offsets, Some(b), self.stride, self.padding())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        let w = init_tensor(&[d_out, d_in], d_in, init, rng);
        Linear {
            weight: store.add(format!("{name}/weight"), w),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.g.linear(x, w, Some(b))
    }
}
