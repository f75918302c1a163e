//! COCO-style average precision.

use serde::Serialize;

use crate::boxes::{BBox, Detection, GroundTruth};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP averaged over thresholds per class; `None` for classes without gts.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_detections: usize,
    pub num_gts: usize,
}

/// IoU in double precision, so a ratio equal to a threshold compares equal.
fn iou64(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.as_array();
    let [bx1, by1, bx2, by2] = b.as_array();
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0) + (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP of one class at one threshold with 101-point interpolation.
/// Detections are matched greedily in descending score order (ties by image
/// then by position), each to the unmatched same-class gt of highest IoU.
pub fn class_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, threshold: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.class_id == class_id).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for (k, det) in d.iter().enumerate() {
            if det.class_id == class_id {
                order.push((img, k));
            }
        }
    }
    order.sort_by(|&(ia, ka), &(ib, kb)| {
        dets[ib][kb].score.total_cmp(&dets[ia][ka].score).then((ia, ka).cmp(&(ib, kb)))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for &(img, k) in &order {
        let det = &dets[img][k];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[img].iter().enumerate() {
            if gt.class_id != class_id || matched[img][gi] {
                continue;
            }
            let v = iou64(&det.bbox, &gt.bbox);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[img][gi] = true;
        }
        tp.push(best.is_some());
    }

    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let pos = recall.partition_point(|&x| x < target);
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    Some(sum / 101.0)
}

/// AP, AP50 and AP75 over the classes that have at least one gt.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> EvalReport {
    let thresholds = iou_thresholds();
    let mut grid: Vec<Vec<Option<f64>>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        grid.push(thresholds.iter().map(|&t| class_ap(dets, gts, c, t)).collect());
    }
    let mean_at = |ti: usize| -> f64 {
        let vals: Vec<f64> = grid.iter().filter_map(|row| row[ti]).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let per_class_ap: Vec<Option<f64>> = grid
        .iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let ap = (0..thresholds.len()).map(mean_at).sum::<f64>() / thresholds.len() as f64;
    EvalReport {
        ap,
        ap50: mean_at(0),
        ap75: mean_at(5),
        per_class_ap,
        num_detections: dets.iter().map(Vec::len).sum(),
        num_gts: gts.iter().map(Vec::len).sum(),
    }
}
