use rand::Rng;

use crate::config::{Alignment, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, Init};
use crate::tensor::{ParamStore, Var};

/// Dense one-stage head. P3 aligns with a 3x3 kernel, P4..P7 share a 5x5.
pub struct SHead {
    offsets: OffsetSource,
    align: [Conv2d; 2],
    cls_feature: Conv2d,
    reg_feature: Conv2d,
    cls_out: Conv2d,
    reg_out: Conv2d,
}

/// Where the deformable offsets come from. Offset layers are `[P3, P4..P7]`.
enum OffsetSource {
    None,
    /// Micro-network on the refinement deltas.
    Micro { trunk: Vec<Conv2d>, out: [Conv2d; 2] },
    /// 3x3 conv on the pyramid feature.
    Feature([Conv2d; 2]),
}

/// Dense outputs of one level: `(n, k + 1)`, `(n, 4)` and `(n, s_fc)`
/// channels over the level's grid.
#[derive(Clone, Copy, Debug)]
pub struct SHeadLevel {
    pub logits: Var,
    pub deltas: Var,
    pub reg_feature: Var,
}

impl SHead {
    /// Layers shared by every alignment variant are created first so that a
    /// given rng state initialises them identically across variants.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TrainConfig) -> Self {
        let f = cfg.fpn_channels;
        let align = [
            Conv2d::new(store, rng, "shead/align_p3", f, cfg.s_ch, 3, 1, Init::He),
            Conv2d::new(store, rng, "shead/align_p4p7", f, cfg.s_ch, 5, 1, Init::He),
        ];
        let cls_feature = Conv2d::new(store, rng, "shead/cls_feature", cfg.s_ch, cfg.s_fc, 1, 1, Init::He);
        let reg_feature = Conv2d::new(store, rng, "shead/reg_feature", cfg.s_ch, cfg.s_fc, 1, 1, Init::He);
        let cls_out = Conv2d::new(store, rng, "shead/cls_out", cfg.s_fc, cfg.num_logits(), 1, 1, Init::Normal(0.01));
        let reg_out = Conv2d::new(store, rng, "shead/reg_out", cfg.s_fc, 4, 1, 1, Init::Normal(0.01));

        // one offset layer per alignment kernel: 2 * 3 * 3 and 2 * 5 * 5 channels
        let offset_layers = |store: &mut ParamStore, rng: &mut _, name: &str, cin: usize, k: usize| {
            [
                Conv2d::new(store, rng, &format!("{name}_p3"), cin, 2 * 9, k, 1, Init::Normal(0.01)),
                Conv2d::new(store, rng, &format!("{name}_p4p7"), cin, 2 * 25, k, 1, Init::Normal(0.01)),
            ]
        };
        let offsets = match cfg.alignment {
            Alignment::Plain => OffsetSource::None,
            Alignment::Guided => {
                let mut trunk = Vec::new();
                let mut cin = 4;
                for (i, &c) in cfg.micro_channels.iter().enumerate() {
                    trunk.push(Conv2d::new(store, rng, &format!("shead/micro{i}"), cin, c, 1, 1, Init::He));
                    cin = c;
                }
                let out = offset_layers(store, rng, "shead/micro_offsets", cin, 1);
                OffsetSource::Micro { trunk, out }
            }
            Alignment::Deformable => OffsetSource::Feature(offset_layers(store, rng, "shead/feature_offsets", f, 3)),
        };
        SHead {
            offsets,
            align,
            cls_feature,
            reg_feature,
            cls_out,
            reg_out,
        }
    }

    /// Offset maps for level index `li` (0 is P3) from the refinement deltas.
    /// `None` for the plain variant.
    pub fn offsets(&self, ctx: &mut Ctx, feature: Var, deltas: Var, li: usize) -> Result<Option<Var>> {
        let which = usize::from(li > 0);
        match &self.offsets {
            OffsetSource::None => Ok(None),
            OffsetSource::Micro { trunk, out } => {
                let mut h = deltas;
                for conv in trunk {
                    let y = conv.forward(ctx, h)?;
                    h = ctx.g.relu(y);
                }
                out[which].forward(ctx, h).map(Some)
            }
            OffsetSource::Feature(layers) => layers[which].forward(ctx, feature).map(Some),
        }
    }

    /// Micro-network output layers, `[P3, P4..P7]`, when guided.
    pub fn micro_output_layers(&self) -> Option<&[Conv2d; 2]> {
        match &self.offsets {
            OffsetSource::Micro { out, .. } => Some(out),
            _ => None,
        }
    }

    /// `student[i]` is the pyramid level P(3+i) and `deltas[i]` the
    /// refinement regression output on it. Deltas should already be detached
    /// if the offset path must not train the refinement module.
    pub fn forward(&self, ctx: &mut Ctx, student: &[Var], deltas: &[Var]) -> Result<Vec<SHeadLevel>> {
        if student.len() != deltas.len() {
            return Err(Error::shape("shead", "one delta map per level required"));
        }
        let mut out = Vec::with_capacity(student.len());
        for (li, (&p, &d)) in student.iter().zip(deltas).enumerate() {
            let which = usize::from(li > 0);
            let aligned = match self.offsets(ctx, p, d, li)? {
                None => self.align[which].forward(ctx, p)?,
                Some(off) => self.align[which].forward_deformable(ctx, p, off)?,
            };
            let aligned = ctx.g.relu(aligned);
            let c = self.cls_feature.forward(ctx, aligned)?;
            let c = ctx.g.relu(c);
            let r = self.reg_feature.forward(ctx, aligned)?;
            let reg_feature = ctx.g.relu(r);
            out.push(SHeadLevel {
                logits: self.cls_out.forward(ctx, c)?,
                deltas: self.reg_out.forward(ctx, reg_feature)?,
                reg_feature,
            });
        }
        Ok(out)
    }
}
