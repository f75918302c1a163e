//! One-stage inference, plus a two-stage path through the T-head used only
//! to report the teacher's own accuracy.

use super::raster::Image;
use super::train::{adjusted_anchors, cell_value};
use crate::anchors::Proposal;
use crate::backbone::{level_stride, stagger, MIN_LEVEL, NUM_LEVELS};
use crate::boxes::{decode, nms_limited, BoxDelta, Detection, NmsScope};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::Detector;
use crate::tensor::{Roi, Tensor, Var};

/// Constants and counts of every filtering stage for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub pre_nms_top_k: usize,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub anchors: usize,
    pub after_top_k: usize,
    pub after_score_threshold: usize,
    pub after_nms: usize,
    pub detections: usize,
}

impl InferenceTrace {
    fn new(cfg: &TrainConfig) -> Self {
        InferenceTrace {
            pre_nms_top_k: cfg.infer_top_k,
            nms_threshold: cfg.infer_nms,
            score_threshold: cfg.score_threshold,
            max_detections: cfg.max_detections,
            anchors: 0,
            after_top_k: 0,
            after_score_threshold: 0,
            after_nms: 0,
            detections: 0,
        }
    }
}

/// Highest-scoring `k` candidates, ties to the lower index.
fn top_k(cands: &[Proposal], k: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| cands[i]).collect()
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Score threshold, per-class NMS and the final cap.
fn finish(cands: Vec<Detection>, cfg: &TrainConfig, trace: &mut InferenceTrace) -> Vec<Detection> {
    trace.after_score_threshold = cands.len();
    let keep = nms_limited(&cands, cfg.infer_nms as f32, NmsScope::PerClass, None);
    trace.after_nms = keep.len();
    let out: Vec<Detection> = keep.iter().take(cfg.max_detections).map(|&i| cands[i]).collect();
    trace.detections = out.len();
    out
}

/// Per-class detections from `(k + 1)` logits and a box; background dropped.
fn push_class_scores(out: &mut Vec<Detection>, logits: &[f32], bbox: crate::boxes::BBox, cfg: &TrainConfig) {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return;
    }
    let probs = softmax(logits);
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p as f64 >= cfg.score_threshold {
            out.push(Detection {
                bbox,
                score: p,
                class_id: c - 1,
            });
        }
    }
}

/// Backbone, pyramid without P2, refinement, top-k adjusted anchors, S-head
/// and a second decode.
pub fn infer(model: &Detector, images: &[&Image]) -> Result<Vec<(Vec<Detection>, InferenceTrace)>> {
    let cfg = model.config();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let input = model.batch_tensor(images)?;
    let mut ctx = Ctx::inference(&model.store);
    let x = ctx.g.constant(input);
    let c = model.backbone.forward(&mut ctx, x)?;
    let pyramid = model.fpn.forward(&mut ctx, &c, false)?;
    let st = stagger(&pyramid);
    let grids = model.anchor_grids();
    let refine = model.refinement.forward(&mut ctx, &st.student)?;
    let shead = model.shead.forward(&mut ctx, &st.student, &refine.deltas)?;
    let size = (cfg.image_size as f32, cfg.image_size as f32);
    let k = cfg.num_logits();

    let mut results = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        let mut trace = InferenceTrace::new(cfg);
        let cands = adjusted_anchors(&ctx, &grids, &refine, b, cfg.image_size);
        trace.anchors = cands.len();
        let kept = top_k(&cands, cfg.infer_top_k);
        trace.after_top_k = kept.len();
        let mut dets = Vec::new();
        for p in &kept {
            let level = &shead[p.level - MIN_LEVEL];
            let lv = ctx.g.value(level.logits);
            let dv = ctx.g.value(level.deltas);
            let logits: Vec<f32> = (0..k).map(|ch| cell_value(lv, b, ch, p.i, p.j)).collect();
            let d = BoxDelta::from_slice(&[0, 1, 2, 3].map(|ch| cell_value(dv, b, ch, p.i, p.j)));
            push_class_scores(&mut dets, &logits, decode(&p.bbox, &d, size), cfg);
        }
        let out = finish(dets, cfg, &mut trace);
        results.push((out, trace));
    }
    Ok(results)
}

/// Two-stage detections from the T-head on the same top-k adjusted anchors.
pub fn infer_teacher(model: &Detector, images: &[&Image]) -> Result<Vec<Vec<Detection>>> {
    let cfg = model.config();
    let Some(thead) = &model.thead else {
        return Err(Error::Config("the model has no T-head".into()));
    };
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let input = model.batch_tensor(images)?;
    let mut ctx = Ctx::inference(&model.store);
    let x = ctx.g.constant(input);
    let c = model.backbone.forward(&mut ctx, x)?;
    let pyramid = model.fpn.forward(&mut ctx, &c, cfg.staggered)?;
    let st = stagger(&pyramid);
    let grids = model.anchor_grids();
    let refine = model.refinement.forward(&mut ctx, &st.student)?;
    let size = (cfg.image_size as f32, cfg.image_size as f32);

    let mut kept_all = Vec::with_capacity(images.len());
    let mut rois = Vec::new();
    for b in 0..images.len() {
        let cands = adjusted_anchors(&ctx, &grids, &refine, b, cfg.image_size);
        let kept: Vec<Proposal> = top_k(&cands, cfg.infer_top_k)
            .into_iter()
            .filter(|p| p.bbox.width() > 0.0 && p.bbox.height() > 0.0)
            .collect();
        rois.extend(kept.iter().map(|p| Roi {
            batch: b,
            level: p.level - MIN_LEVEL,
            bbox: p.bbox.as_array(),
        }));
        kept_all.push(kept);
    }
    let (features, shift): ([Var; NUM_LEVELS], usize) = if cfg.staggered {
        (st.teacher_set()?, 1)
    } else {
        (st.student, 0)
    };
    let strides: Vec<f64> = (0..NUM_LEVELS).map(|li| level_stride(MIN_LEVEL + li - shift) as f64).collect();
    let (logits, deltas) = if rois.is_empty() {
        (Tensor::zeros(&[0, cfg.num_logits()]), Tensor::zeros(&[0, 4]))
    } else {
        let out = thead.forward(&mut ctx, &features, &strides, &rois)?;
        (ctx.g.value(out.logits).clone(), ctx.g.value(out.deltas).clone())
    };
    let k = cfg.num_logits();
    let mut row = 0;
    let mut results = Vec::with_capacity(images.len());
    for kept in kept_all {
        let mut trace = InferenceTrace::new(cfg);
        let mut dets = Vec::new();
        for p in &kept {
            let l = &logits.data()[row * k..(row + 1) * k];
            let d = BoxDelta::from_slice(&deltas.data()[row * 4..row * 4 + 4]);
            push_class_scores(&mut dets, l, decode(&p.bbox, &d, size), cfg);
            row += 1;
        }
        results.push(finish(dets, cfg, &mut trace));
    }
    Ok(results)
}

/// Runs [`infer`] over many images in batches of `cfg.batch_size`.
pub fn infer_all(model: &Detector, images: &[&Image]) -> Result<Vec<(Vec<Detection>, InferenceTrace)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(model.config().batch_size) {
        out.extend(infer(model, chunk)?);
    }
    Ok(out)
}

pub fn infer_teacher_all(model: &Detector, images: &[&Image]) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(model.config().batch_size) {
        out.extend(infer_teacher(model, chunk)?);
    }
    Ok(out)
}
