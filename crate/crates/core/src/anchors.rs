//! Anchor grids, refinement and head label assignment, proposal filtering and
//! the sampling policies of both heads.

use rand::seq::index::sample;
use rand::Rng;

use crate::backbone::{level_stride, MAX_LEVEL, MIN_LEVEL};
use crate::boxes::{encode, nms_limited, BBox, Detection, GroundTruth, NmsScope};
use crate::config::{MimicSubset, TrainConfig};
use crate::error::{Error, Result};

/// One square anchor per cell of a level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid {
    pub level: usize,
    pub stride: f32,
    pub side: f32,
    pub height: usize,
    pub width: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, i: usize, j: usize) -> (f32, f32) {
        ((j as f32 + 0.5) * self.stride, (i as f32 + 0.5) * self.stride)
    }

    pub fn anchor(&self, i: usize, j: usize) -> BBox {
        let (cx, cy) = self.center(i, j);
        BBox::from_center(cx, cy, self.side, self.side)
    }
}

pub fn generate_anchors(level: usize, height: usize, width: usize, base_scale: f64) -> Result<AnchorGrid> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        return Err(Error::invalid("generate_anchors", format!("level {level} outside 3..=7")));
    }
    let stride = level_stride(level) as f32;
    Ok(AnchorGrid {
        level,
        stride,
        side: (base_scale * level_stride(level) as f64) as f32,
        height,
        width,
    })
}

/// Grids for P3..P7 of a square input.
pub fn anchor_grids(image_size: usize, base_scale: f64) -> Vec<AnchorGrid> {
    (MIN_LEVEL..=MAX_LEVEL)
        .map(|l| {
            let side = image_size / level_stride(l);
            generate_anchors(l, side, side, base_scale).expect("level in range")
        })
        .collect()
}

/// Geometric mean of the box sides.
pub fn object_scale(b: &BBox) -> f64 {
    (b.width() as f64 * b.height() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleRangeConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub shrink: f64,
    pub base_scale: f64,
}

impl Default for ScaleRangeConfig {
    fn default() -> Self {
        ScaleRangeConfig {
            eta1: 1.0,
            eta2: 2.0,
            shrink: 0.3,
            base_scale: 4.0,
        }
    }
}

impl ScaleRangeConfig {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        ScaleRangeConfig {
            eta1: cfg.eta1,
            eta2: cfg.eta2,
            shrink: cfg.shrink,
            base_scale: cfg.base_scale,
        }
    }

    /// `[S_l eta1, S_l eta2]`.
    pub fn range(&self, level: usize) -> (f64, f64) {
        let s = self.base_scale * level_stride(level) as f64;
        (s * self.eta1, s * self.eta2)
    }

    /// Levels whose range holds `scale`. A scale sitting on the upper end of
    /// one range and the lower end of the next belongs to the lower level
    /// only. Scales below every range go to P3, above every range to P7.
    pub fn levels_for_scale(&self, scale: f64) -> Vec<usize> {
        if scale < self.range(MIN_LEVEL).0 {
            return vec![MIN_LEVEL];
        }
        if scale > self.range(MAX_LEVEL).1 {
            return vec![MAX_LEVEL];
        }
        let mut out: Vec<usize> = Vec::new();
        for l in MIN_LEVEL..=MAX_LEVEL {
            let (lo, hi) = self.range(l);
            if scale < lo || scale > hi {
                continue;
            }
            let tie_with_lower = scale == lo && out.last() == Some(&(l - 1)) && self.range(l - 1).1 == scale;
            if !tie_with_lower {
                out.push(l);
            }
        }
        out
    }
}

/// Refinement labels for the anchors of one level, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: usize,
    pub objectness: Vec<f32>,
    /// Meaningful only where `objectness` is 1.
    pub deltas: Vec<[f32; 4]>,
    pub gt_index: Vec<Option<usize>>,
}

/// Refinement labels of one image over P3..P7.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementTargets {
    pub levels: Vec<LevelTargets>,
}

impl RefinementTargets {
    pub fn num_positive(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.gt_index.iter().filter(|g| g.is_some()).count())
            .sum()
    }
}

pub fn assign_refinement(grids: &[AnchorGrid], gts: &[BBox], cfg: &ScaleRangeConfig) -> Result<RefinementTargets> {
    let mut levels: Vec<LevelTargets> = grids
        .iter()
        .map(|g| LevelTargets {
            level: g.level,
            objectness: vec![0.0; g.len()],
            deltas: vec![[0.0; 4]; g.len()],
            gt_index: vec![None; g.len()],
        })
        .collect();
    let scales: Vec<f64> = gts.iter().map(object_scale).collect();
    for (gi, gt) in gts.iter().enumerate() {
        let area = gt.shrink(cfg.shrink as f32);
        for level in cfg.levels_for_scale(scales[gi]) {
            let Some(li) = grids.iter().position(|g| g.level == level) else {
                continue;
            };
            let grid = &grids[li];
            let targets = &mut levels[li];
            // cells whose center can lie in the positive area
            let lo = |v: f32| (((v / grid.stride) - 0.5).ceil().max(0.0)) as usize;
            let hi = |v: f32, n: usize| ((((v / grid.stride) - 0.5).floor()) as isize).min(n as isize - 1);
            let (i0, i1) = (lo(area.y1), hi(area.y2, grid.height));
            let (j0, j1) = (lo(area.x1), hi(area.x2, grid.width));
            for i in i0 as isize..=i1 {
                for j in j0 as isize..=j1 {
                    let (i, j) = (i as usize, j as usize);
                    let (cx, cy) = grid.center(i, j);
                    if !area.contains_point(cx, cy) {
                        continue;
                    }
                    let k = i * grid.width + j;
                    let wins = match targets.gt_index[k] {
                        None => true,
                        Some(prev) => scales[gi] < scales[prev],
                    };
                    if wins {
                        let d = encode(&grid.anchor(i, j), gt)?;
                        targets.objectness[k] = 1.0;
                        targets.deltas[k] = d.to_array();
                        targets.gt_index[k] = Some(gi);
                    }
                }
            }
        }
    }
    Ok(RefinementTargets { levels })
}

/// Head label of one box: 0 is background, `c + 1` is class `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouLabel {
    pub label: usize,
    pub gt: Option<usize>,
    pub iou: f32,
    /// Regression target toward the matched gt; zeros for background.
    pub delta: [f32; 4],
}

impl IouLabel {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

/// Matches each box to its highest-IoU gt (lowest index on ties); positive
/// when that IoU reaches `threshold`.
pub fn assign_iou(boxes: &[BBox], gts: &[GroundTruth], threshold: f32) -> Result<Vec<IouLabel>> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f32)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let v = crate::boxes::iou(b, &gt.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= threshold => Ok(IouLabel {
                    label: gts[gi].class_id + 1,
                    gt: Some(gi),
                    iou: v,
                    delta: encode(b, &gts[gi].bbox)?.to_array(),
                }),
                other => Ok(IouLabel {
                    label: 0,
                    gt: None,
                    iou: other.map_or(0.0, |(_, v)| v),
                    delta: [0.0; 4],
                }),
            }
        })
        .collect()
}

/// A refinement-adjusted anchor and where it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f32,
    pub level: usize,
    pub i: usize,
    pub j: usize,
    pub anchor: BBox,
}

/// Drops boxes under one pixel on a side, applies class-agnostic NMS and
/// keeps at most `k` by score.
pub fn filter_proposals(candidates: &[Proposal], nms_threshold: f32, k: usize) -> Vec<Proposal> {
    let usable: Vec<&Proposal> = candidates
        .iter()
        .filter(|p| p.bbox.width() >= 1.0 && p.bbox.height() >= 1.0)
        .collect();
    let dets: Vec<Detection> = usable
        .iter()
        .map(|p| Detection {
            bbox: p.bbox,
            score: p.score,
            class_id: 0,
        })
        .collect();
    nms_limited(&dets, nms_threshold, NmsScope::ClassAgnostic, Some(k))
        .into_iter()
        .map(|i| *usable[i])
        .collect()
}

fn pick(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut out: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}

/// T-head sample: up to `round(n * pos_ratio)` positives, negatives for the rest.
pub fn sample_teacher(labels: &[IouLabel], n: usize, pos_ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i].is_positive());
    let want_pos = ((n as f64) * pos_ratio).round() as usize;
    let mut out = pick(&pos, want_pos.min(n), rng);
    let fill = n - out.len();
    out.extend(pick(&neg, fill, rng));
    out
}

/// The `k` highest losses, ties to the lower index.
pub fn select_student_cls(losses: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// At most `max_pos` positives, uniformly.
pub fn sample_student_reg(labels: &[IouLabel], max_pos: usize, rng: &mut impl Rng) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    pick(&pos, max_pos, rng)
}

/// Mimic subset of the teacher sample.
pub fn sample_mimic(teacher: &[usize], subset: MimicSubset, rng: &mut impl Rng) -> Vec<usize> {
    match subset {
        MimicSubset::All => teacher.to_vec(),
        MimicSubset::Count(m) => pick(teacher, m, rng),
    }
}
