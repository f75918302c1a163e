//! Box geometry, the center/log-size delta codec, IoU and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, corner convention.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f32, height: f32) -> BBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        BBox::new(x1, y1, self.x2.clamp(x1, width), self.y2.clamp(y1, height))
    }

    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Central sub-rectangle with `factor` times the width and height.
    pub fn shrink(&self, factor: f32) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.width() * factor, self.height() * factor)
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f32) -> BBox {
        BBox::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64]
    }
}

/// Regression target relative to a reference box.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f32,
    pub dy: f32,
    pub dw: f32,
    pub dh: f32,
}

impl BoxDelta {
    pub fn to_array(self) -> [f32; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub class_id: usize,
}

/// Annotated object. Class ids start at 0; background is not a class here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Largest log-scale step accepted when decoding.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Encodes `gt` relative to `anchor`: normalized center offsets and log
/// size ratios.
pub fn encode(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width() as f64, anchor.height() as f64);
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::invalid("encode", format!("reference box {anchor:?} has no area")));
    }
    let (gw, gh) = (gt.width() as f64, gt.height() as f64);
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::invalid("encode", format!("target box {gt:?} has no area")));
    }
    let acx = anchor.x1 as f64 + 0.5 * aw;
    let acy = anchor.y1 as f64 + 0.5 * ah;
    let gcx = gt.x1 as f64 + 0.5 * gw;
    let gcy = gt.y1 as f64 + 0.5 * gh;
    Ok(BoxDelta {
        dx: ((gcx - acx) / aw) as f32,
        dy: ((gcy - acy) / ah) as f32,
        dw: (gw / aw).ln() as f32,
        dh: (gh / ah).ln() as f32,
    })
}

/// Inverse of [`encode`] without clipping. Log scales are clamped.
pub fn decode_unclipped(anchor: &BBox, d: &BoxDelta) -> BBox {
    let (aw, ah) = (anchor.width() as f64, anchor.height() as f64);
    let acx = anchor.x1 as f64 + 0.5 * aw;
    let acy = anchor.y1 as f64 + 0.5 * ah;
    let lim = max_log_scale();
    let cx = acx + d.dx as f64 * aw;
    let cy = acy + d.dy as f64 * ah;
    let w = aw * (d.dw as f64).min(lim).exp();
    let h = ah * (d.dh as f64).min(lim).exp();
    BBox::new(
        (cx - 0.5 * w) as f32,
        (cy - 0.5 * h) as f32,
        (cx + 0.5 * w) as f32,
        (cy + 0.5 * h) as f32,
    )
}

/// Applies `d` to `anchor` and clips to `[0, width] x [0, height]`.
pub fn decode(anchor: &BBox, d: &BoxDelta, image_size: (f32, f32)) -> BBox {
    decode_unclipped(anchor, d).clip(image_size.0, image_size.1)
}

/// Whether NMS suppresses only within a class or across all classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmsScope {
    ClassAgnostic,
    PerClass,
}

/// Greedy NMS. Returns kept indices in descending score order; equal scores
/// keep the lower index first. A box is suppressed when its IoU with a kept
/// box is strictly greater than `iou_threshold`. Stops after `max_keep`.
pub fn nms_limited(dets: &[Detection], iou_threshold: f32, scope: NmsScope, max_keep: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let limit = max_keep.unwrap_or(usize::MAX);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() >= limit {
            break;
        }
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if scope == NmsScope::PerClass && dets[j].class_id != dets[i].class_id {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f32, scope: NmsScope) -> Vec<usize> {
    nms_limited(dets, iou_threshold, scope, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: BBox, score: f32, class_id: usize) -> Detection {
        Detection { bbox: b, score, class_id }
    }

    #[test]
    fn iou_cases() {
        let b = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
        let z = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn encode_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode(&a, &a).unwrap(), BoxDelta::default());
        let d = encode(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert_eq!(d, BoxDelta { dx: 0.5, dy: 0.0, dw: 0.0, dh: 0.0 });
        let d = encode(&a, &BBox::new(0.0, 0.0, 20.0, 20.0)).unwrap();
        assert!((d.dx - 0.5).abs() < 1e-7 && (d.dy - 0.5).abs() < 1e-7);
        assert!((d.dw - 2f32.ln()).abs() < 1e-7 && (d.dh - 2f32.ln()).abs() < 1e-7);
        assert!(encode(&BBox::new(1.0, 1.0, 1.0, 5.0), &a).is_err());
    }

    #[test]
    fn decode_identity_and_clipping() {
        let a = BBox::new(10.0, 20.0, 50.0, 60.0);
        assert_eq!(decode(&a, &BoxDelta::default(), (256.0, 256.0)), a);
        let far = BoxDelta { dx: 10.0, dy: -10.0, dw: 1.0, dh: 0.5 };
        let b = decode(&a, &far, (256.0, 128.0));
        assert!(b.x1 >= 0.0 && b.x2 <= 256.0 && b.y1 >= 0.0 && b.y2 <= 128.0);
        assert!(b.is_valid());
        let huge = BoxDelta { dx: 0.0, dy: 0.0, dw: 1e6, dh: 1e6 };
        let c = decode_unclipped(&a, &huge);
        assert!(c.width().is_finite() && (c.width() / 40.0 - 62.5).abs() < 1e-3);
    }

    #[test]
    fn nms_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[det(b, 0.3, 0)], 0.5, NmsScope::PerClass), vec![0]);
        let two = [det(b, 0.8, 0), det(b, 0.9, 0)];
        assert_eq!(nms(&two, 0.5, NmsScope::PerClass), vec![1]);
        let other_class = [det(b, 0.8, 0), det(b, 0.9, 1)];
        assert_eq!(nms(&other_class, 0.5, NmsScope::PerClass), vec![1, 0]);
        assert_eq!(nms(&other_class, 0.5, NmsScope::ClassAgnostic), vec![1]);
        // equal IoU and threshold does not suppress
        let half = [det(BBox::new(0.0, 0.0, 2.0, 2.0), 0.9, 0), det(BBox::new(1.0, 0.0, 3.0, 2.0), 0.8, 0)];
        assert_eq!(nms(&half, 1.0 / 3.0 + 1e-7, NmsScope::PerClass).len(), 2);
        // ties keep the lower index
        let tie = [det(b, 0.5, 0), det(b, 0.5, 0)];
        assert_eq!(nms(&tie, 0.5, NmsScope::PerClass), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..200.0, 0.0f32..200.0, 1.0f32..120.0, 1.0f32..120.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (p, q) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(p, q);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), g in arb_box()) {
            // size ratios beyond the clamp are not invertible
            prop_assume!(g.width() / a.width() < 60.0 && g.height() / a.height() < 60.0);
            let d = encode(&a, &g).unwrap();
            let r = decode_unclipped(&a, &d);
            for (x, y) in r.as_array().iter().zip(g.as_array()) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }

        #[test]
        fn nms_is_idempotent(boxes in prop::collection::vec((arb_box(), 0.0f32..1.0, 0usize..3), 1..40)) {
            let dets: Vec<Detection> = boxes.iter().map(|&(b, s, c)| det(b, s, c)).collect();
            let keep = nms(&dets, 0.5, NmsScope::PerClass);
            let kept: Vec<Detection> = keep.iter().map(|&i| dets[i]).collect();
            let again = nms(&kept, 0.5, NmsScope::PerClass);
            prop_assert_eq!(again, (0..kept.len()).collect::<Vec<_>>());
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
