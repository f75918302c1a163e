use rand::Rng;

use crate::anchors::RefinementTargets;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, Init};
use crate::tensor::{ParamStore, Reduction, Var};

/// Class-agnostic objectness and box regression shared by P3..P7.
pub struct RefinementModule {
    conv: Conv2d,
    objectness: Conv2d,
    regression: Conv2d,
}

/// Per level `(n, 1, h, w)` logits and `(n, 4, h, w)` deltas.
#[derive(Clone, Debug)]
pub struct RefinementOutput {
    pub objectness: Vec<Var>,
    pub deltas: Vec<Var>,
}

impl RefinementModule {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TrainConfig) -> Self {
        let f = cfg.fpn_channels;
        RefinementModule {
            conv: Conv2d::new(store, rng, "refine/conv", f, f, 3, 1, Init::He),
            objectness: Conv2d::new(store, rng, "refine/objectness", f, 1, 1, 1, Init::Normal(0.01)),
            regression: Conv2d::new(store, rng, "refine/regression", f, 4, 1, 1, Init::Normal(0.01)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, levels: &[Var]) -> Result<RefinementOutput> {
        let mut out = RefinementOutput {
            objectness: Vec::with_capacity(levels.len()),
            deltas: Vec::with_capacity(levels.len()),
        };
        for &p in levels {
            let h = self.conv.forward(ctx, p)?;
            let h = ctx.g.relu(h);
            out.objectness.push(self.objectness.forward(ctx, h)?);
            out.deltas.push(self.regression.forward(ctx, h)?);
        }
        Ok(out)
    }
}

/// BCE averaged over every anchor of the batch plus L1 (summed over the four
/// coordinates) averaged over positive anchors.
pub fn refinement_loss(ctx: &mut Ctx, out: &RefinementOutput, targets: &[RefinementTargets]) -> Result<Var> {
    const OP: &str = "refinement_loss";
    let n = targets.len();
    let num_levels = out.objectness.len();
    if targets.iter().any(|t| t.levels.len() != num_levels) {
        return Err(Error::shape(OP, "targets and outputs disagree on level count"));
    }
    let mut anchors = 0usize;
    for &o in &out.objectness {
        anchors += ctx.g.value(o).numel();
    }
    let positives: usize = targets.iter().map(|t| t.num_positive()).sum();

    let mut terms = Vec::with_capacity(2 * num_levels);
    for li in 0..num_levels {
        let (bn, _, h, w) = ctx.g.value(out.objectness[li]).dims4(OP)?;
        if bn != n {
            return Err(Error::shape(OP, format!("{bn} images in outputs, {n} targets")));
        }
        let hw = h * w;
        let mut obj = Vec::with_capacity(n * hw);
        let mut reg = vec![0.0f32; n * 4 * hw];
        let mut mask = vec![0.0f32; n * 4 * hw];
        for (b, t) in targets.iter().enumerate() {
            let lt = &t.levels[li];
            if lt.objectness.len() != hw {
                return Err(Error::shape(OP, "target grid does not match feature map"));
            }
            obj.extend_from_slice(&lt.objectness);
            for k in 0..hw {
                if lt.objectness[k] > 0.0 {
                    for c in 0..4 {
                        reg[(b * 4 + c) * hw + k] = lt.deltas[k][c];
                        mask[(b * 4 + c) * hw + k] = 1.0;
                    }
                }
            }
        }
        let bce = ctx.g.bce_with_logits(out.objectness[li], &obj, None, Reduction::Scaled(1.0 / anchors as f64))?;
        terms.push(bce);
        if positives > 0 {
            let l1 = ctx.g.l1_loss(out.deltas[li], &reg, Some(&mask), Reduction::Scaled(1.0 / positives as f64))?;
            terms.push(l1);
        }
    }
    ctx.g.add_scalars(&terms)
}
