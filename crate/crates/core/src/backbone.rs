//! Convolutional backbone, feature pyramid, and the split of the pyramid into
//! teacher and student sets.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, Init};
use crate::tensor::{ParamStore, Var};

/// Lowest and highest student level.
pub const MIN_LEVEL: usize = 3;
pub const MAX_LEVEL: usize = 7;
pub const NUM_LEVELS: usize = MAX_LEVEL - MIN_LEVEL + 1;

pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// C2..C5 at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub c: [Var; 4],
}

/// P2..P7 at strides 4..128. P2 is absent outside training.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub p2: Option<Var>,
    /// P3..P7.
    pub upper: [Var; NUM_LEVELS],
}

impl PyramidFeatures {
    pub fn level(&self, level: usize) -> Result<Var> {
        match level {
            2 => self.p2.ok_or_else(|| Error::invalid("pyramid", "P2 is only computed in training mode")),
            MIN_LEVEL..=MAX_LEVEL => Ok(self.upper[level - MIN_LEVEL]),
            _ => Err(Error::invalid("pyramid", format!("no level {level}"))),
        }
    }
}

/// Two overlapping views of one pyramid.
#[derive(Clone, Copy, Debug)]
pub struct StaggeredPyramid {
    /// P2..P6, used by the T-head.
    pub teacher: Option<[Var; NUM_LEVELS]>,
    /// P3..P7, used by the refinement module and the S-head.
    pub student: [Var; NUM_LEVELS],
}

impl StaggeredPyramid {
    pub fn teacher_level(student_level: usize) -> usize {
        student_level - 1
    }

    pub fn teacher_set(&self) -> Result<[Var; NUM_LEVELS]> {
        self.teacher
            .ok_or_else(|| Error::invalid("stagger", "teacher set requested without P2"))
    }
}

pub fn stagger(p: &PyramidFeatures) -> StaggeredPyramid {
    let teacher = p.p2.map(|p2| {
        let mut t = [p2; NUM_LEVELS];
        t[1..].copy_from_slice(&p.upper[..NUM_LEVELS - 1]);
        t
    });
    StaggeredPyramid {
        teacher,
        student: p.upper,
    }
}

pub struct Backbone {
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TrainConfig) -> Self {
        let w = &cfg.backbone_widths;
        let stem = Conv2d::new(store, rng, "backbone/stem", 3, w[0], 3, 2, Init::He);
        let mut in_ch = w[0];
        let stages = w
            .iter()
            .enumerate()
            .map(|(s, &out_ch)| {
                let layers = (0..cfg.backbone_depth)
                    .map(|d| {
                        let stride = if d == 0 { 2 } else { 1 };
                        let conv = Conv2d::new(store, rng, &format!("backbone/c{}/{d}", s + 2), in_ch, out_ch, 3, stride, Init::He);
                        in_ch = out_ch;
                        conv
                    })
                    .collect();
                layers
            })
            .collect();
        Backbone { stem, stages }
    }

    /// `image` is `(n, 3, h, w)`, already normalised.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<BackboneFeatures> {
        let (_, c, h, w) = ctx.g.value(image).dims4("backbone")?;
        if c != 3 || h == 0 || w == 0 || h % 128 != 0 || w % 128 != 0 {
            return Err(Error::shape(
                "backbone",
                format!("need 3 channels and sides that are multiples of 128, got {c}x{h}x{w}"),
            ));
        }
        let x = self.stem.forward(ctx, image)?;
        let mut x = ctx.g.relu(x);
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in stage {
                let y = conv.forward(ctx, x)?;
                x = ctx.g.relu(y);
            }
            out.push(x);
        }
        Ok(BackboneFeatures {
            c: [out[0], out[1], out[2], out[3]],
        })
    }
}

pub struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
    p6: Conv2d,
    p7: Conv2d,
}

impl Fpn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TrainConfig) -> Self {
        let f = cfg.fpn_channels;
        let lateral = (0..4)
            .map(|i| Conv2d::new(store, rng, &format!("fpn/lateral{}", i + 2), cfg.backbone_widths[i], f, 1, 1, Init::He))
            .collect();
        let output = (0..4)
            .map(|i| Conv2d::new(store, rng, &format!("fpn/output{}", i + 2), f, f, 3, 1, Init::He))
            .collect();
        Fpn {
            lateral,
            output,
            p6: Conv2d::new(store, rng, "fpn/p6", cfg.backbone_widths[3], f, 3, 2, Init::He),
            p7: Conv2d::new(store, rng, "fpn/p7", f, f, 3, 2, Init::He),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, c: &BackboneFeatures, train_mode: bool) -> Result<PyramidFeatures> {
        // merged[i] is the top-down sum at C(i+2); P2 is skipped outside training
        let first = if train_mode { 0 } else { 1 };
        let mut merged: [Option<Var>; 4] = [None; 4];
        let mut top = self.lateral[3].forward(ctx, c.c[3])?;
        merged[3] = Some(top);
        for i in (first..3).rev() {
            let lat = self.lateral[i].forward(ctx, c.c[i])?;
            let up = ctx.g.upsample2x(top)?;
            top = ctx.g.add(lat, up)?;
            merged[i] = Some(top);
        }
        let mut p = [None; 4];
        for i in first..4 {
            p[i] = Some(self.output[i].forward(ctx, merged[i].expect("merged above"))?);
        }
        let p6 = self.p6.forward(ctx, c.c[3])?;
        let p6_act = ctx.g.relu(p6);
        let p7 = self.p7.forward(ctx, p6_act)?;
        Ok(PyramidFeatures {
            p2: p[0],
            upper: [p[1].unwrap(), p[2].unwrap(), p[3].unwrap(), p6, p7],
        })
    }
}

/// Maps 8-bit-range pixels in `[0, 1]` to roughly zero-mean unit-scale input.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) / 0.25
}
