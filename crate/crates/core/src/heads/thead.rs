use rand::Rng;

use crate::anchors::IouLabel;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::layers::{Conv2d, Ctx, Init, Linear};
use crate::tensor::{ParamStore, Reduction, Roi, Var};

/// Two-stage head on RoI-aligned features.
pub struct THead {
    cls_fc: [Linear; 2],
    cls_out: Linear,
    reg_convs: Vec<Conv2d>,
    reg_fc: Linear,
    reg_out: Linear,
    output_size: usize,
    sampling: usize,
}

/// Per-box outputs: `(m, k + 1)` logits, `(m, 4)` deltas and the
/// `(m, s_fc)` regression feature that precedes the delta layer.
#[derive(Clone, Copy, Debug)]
pub struct THeadOutput {
    pub logits: Var,
    pub deltas: Var,
    pub reg_feature: Var,
}

impl THead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TrainConfig) -> Self {
        let bins = cfg.roi_output * cfg.roi_output;
        let flat = cfg.fpn_channels * bins;
        let reg_convs = (0..4)
            .map(|i| {
                let cin = if i == 0 { cfg.fpn_channels } else { cfg.t_conv };
                Conv2d::new(store, rng, &format!("thead/reg_conv{i}"), cin, cfg.t_conv, 3, 1, Init::He)
            })
            .collect();
        THead {
            cls_fc: [
                Linear::new(store, rng, "thead/cls_fc0", flat, cfg.t_fc, Init::He),
                Linear::new(store, rng, "thead/cls_fc1", cfg.t_fc, cfg.t_fc, Init::He),
            ],
            cls_out: Linear::new(store, rng, "thead/cls_out", cfg.t_fc, cfg.num_logits(), Init::Normal(0.01)),
            reg_convs,
            reg_fc: Linear::new(store, rng, "thead/reg_fc", cfg.t_conv * bins, cfg.s_fc, Init::He),
            reg_out: Linear::new(store, rng, "thead/reg_out", cfg.s_fc, 4, Init::Normal(0.01)),
            output_size: cfg.roi_output,
            sampling: cfg.roi_sampling,
        }
    }

    /// `features[r.level]` is read at `strides[r.level]` for each roi.
    pub fn forward(&self, ctx: &mut Ctx, features: &[Var], strides: &[f64], rois: &[Roi]) -> Result<THeadOutput> {
        let pooled = ctx.g.roi_align(features, strides, rois, self.output_size, self.sampling)?;
        let m = rois.len();
        let shape = ctx.g.shape(pooled).to_vec();
        let flat = ctx.g.reshape(pooled, &[m, shape[1..].iter().product()])?;

        let mut h = flat;
        for fc in &self.cls_fc {
            let y = fc.forward(ctx, h)?;
            h = ctx.g.relu(y);
        }
        let logits = self.cls_out.forward(ctx, h)?;

        let mut r = pooled;
        for conv in &self.reg_convs {
            let y = conv.forward(ctx, r)?;
            r = ctx.g.relu(y);
        }
        let rshape = ctx.g.shape(r).to_vec();
        let r = ctx.g.reshape(r, &[m, rshape[1..].iter().product()])?;
        let y = self.reg_fc.forward(ctx, r)?;
        let reg_feature = ctx.g.relu(y);
        let deltas = self.reg_out.forward(ctx, reg_feature)?;
        Ok(THeadOutput {
            logits,
            deltas,
            reg_feature,
        })
    }
}

/// Cross-entropy averaged over all boxes plus L1 (summed over coordinates)
/// averaged over positive boxes. Shared by both heads.
pub fn box_head_loss(ctx: &mut Ctx, logits: Var, deltas: Var, cls_labels: &[IouLabel], reg_labels: &[IouLabel]) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if !cls_labels.is_empty() {
        let y: Vec<usize> = cls_labels.iter().map(|l| l.label).collect();
        terms.push(ctx.g.cross_entropy(logits, &y, Reduction::Mean)?);
    }
    let npos = reg_labels.iter().filter(|l| l.is_positive()).count();
    if npos > 0 {
        let mut target = Vec::with_capacity(reg_labels.len() * 4);
        let mut mask = Vec::with_capacity(reg_labels.len() * 4);
        for l in reg_labels {
            target.extend_from_slice(&l.delta);
            let w = if l.is_positive() { 1.0 } else { 0.0 };
            mask.extend_from_slice(&[w; 4]);
        }
        terms.push(ctx.g.l1_loss(deltas, &target, Some(&mask), Reduction::Scaled(1.0 / npos as f64))?);
    }
    if terms.is_empty() {
        return Ok(ctx.g.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    ctx.g.add_scalars(&terms)
}
