//! The full detector: parameters plus the module layout built from a config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{anchor_grids, AnchorGrid};
use crate::backbone::{normalize_pixel, Backbone, Fpn};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::{RefinementModule, SHead, THead};
use crate::pipeline::Image;
use crate::tensor::{ParamStore, Tensor};

pub struct Detector {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub refinement: RefinementModule,
    pub shead: SHead,
    pub thead: Option<THead>,
    cfg: TrainConfig,
}

/// `key: a -> b` for every key whose value differs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> String {
    a.entries()
        .into_iter()
        .zip(b.entries())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("{}: {} -> {}", x.0, x.1, y.1))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Each module draws its initial weights from its own stream so that
/// variants which add or drop a module leave the others unchanged.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Detector {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = cfg.seed;
        let backbone = Backbone::new(&mut store, &mut module_rng(s, 1), cfg);
        let fpn = Fpn::new(&mut store, &mut module_rng(s, 2), cfg);
        let refinement = RefinementModule::new(&mut store, &mut module_rng(s, 3), cfg);
        let shead = SHead::new(&mut store, &mut module_rng(s, 4), cfg);
        let thead = cfg
            .thead_enabled
            .then(|| THead::new(&mut store, &mut module_rng(s, 5), cfg));
        Ok(Detector {
            store,
            backbone,
            fpn,
            refinement,
            shead,
            thead,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Parameter names and shapes, in creation order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect()
    }

    /// Swaps in a config that builds the same parameter layout, e.g. one
    /// that only changes inference thresholds.
    pub fn replace_config(&mut self, cfg: TrainConfig) -> Result<()> {
        let fresh = Detector::new(&cfg)?;
        if fresh.layout() != self.layout() || fresh.cfg.alignment != self.cfg.alignment {
            return Err(Error::Config(format!(
                "config does not match the model layout ({})",
                config_diff(&self.cfg, &cfg)
            )));
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn anchor_grids(&self) -> Vec<AnchorGrid> {
        anchor_grids(self.cfg.image_size, self.cfg.base_scale)
    }

    /// Stacks images into a normalised `(n, 3, s, s)` batch.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.width != s || img.height != s {
                return Err(Error::shape(
                    "detector",
                    format!("image is {}x{}, model expects {s}x{s}", img.width, img.height),
                ));
            }
            data.extend(img.data.iter().map(|&v| normalize_pixel(v)));
        }
        Tensor::new(&[images.len(), 3, s, s], data)
    }
}
