//! Box algebra shared by proposals, detections, and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-format rectangle in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A box with a score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: Bbox,
    pub score: f64,
}

impl Bbox {
    /// Validated constructor: finite coordinates with `x2 > x1`, `y2 > y1`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Bbox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::contract(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Bbox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }

    /// Clamps every coordinate into `[0, size]`. The result may be degenerate.
    pub fn clip(&self, size: f64) -> Self {
        Bbox {
            x1: self.x1.clamp(0.0, size),
            y1: self.y1.clamp(0.0, size),
            x2: self.x2.clamp(0.0, size),
            y2: self.y2.clamp(0.0, size),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression targets `(tx, ty, tw, th)` taking `anchor` onto `gt`.
pub fn encode_deltas(anchor: &Bbox, gt: &Bbox) -> Result<[f64; 4]> {
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::contract(format!("degenerate anchor {anchor:?}")));
    }
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::contract(format!("degenerate target {gt:?}")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok([
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`encode_deltas`]. Clipping is left to the caller.
pub fn decode_deltas(anchor: &Bbox, d: &[f64; 4]) -> Result<Bbox> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite deltas {d:?}")));
    }
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::contract(format!("degenerate anchor {anchor:?}")));
    }
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.width();
    let cy = ay + d[1] * anchor.height();
    let w = anchor.width() * d[2].exp();
    let h = anchor.height() * d[3].exp();
    let b = Bbox::from_center(cx, cy, w, h);
    if !b.is_valid() {
        return Err(Error::Numeric(format!("deltas {d:?} overflow anchor {anchor:?}")));
    }
    Ok(b)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties keep input order); a box is
/// kept iff its IoU with every kept box is strictly below `iou_thresh`.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    nms_indices(boxes, iou_thresh).into_iter().map(|i| boxes[i]).collect()
}

/// Indices into `boxes` of the survivors of [`nms`], in output order.
pub fn nms_indices(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    nms_indices_capped(boxes, iou_thresh, usize::MAX)
}

/// [`nms_indices`] stopped once `limit` boxes are kept.
pub fn nms_indices_capped(boxes: &[ScoredBox], iou_thresh: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[i].bbox, &boxes[k].bbox) < iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges have zero intersection
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn delta_examples() {
        let a = b(10.0, 20.0, 30.0, 60.0);
        assert_eq!(encode_deltas(&a, &a).unwrap(), [0.0; 4]);
        let shifted = b(30.0, 20.0, 50.0, 60.0);
        assert_eq!(encode_deltas(&a, &shifted).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(decode_deltas(&a, &[0.0; 4]).unwrap(), a);
        let doubled = decode_deltas(&a, &[0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        assert!((doubled.width() - 40.0).abs() < 1e-12);
        assert_eq!(doubled.center(), a.center());
        assert!(decode_deltas(&a, &[f64::NAN, 0.0, 0.0, 0.0]).is_err());
        let flat = Bbox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 5.0 };
        assert!(matches!(encode_deltas(&flat, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let x = b(0.0, 0.0, 10.0, 10.0);
        let kept = nms(
            &[ScoredBox { bbox: x, score: 0.8 }, ScoredBox { bbox: x, score: 0.9 }],
            0.5,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let disjoint: Vec<ScoredBox> = (0..5)
            .map(|i| ScoredBox { bbox: b(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0), score: 0.1 * i as f64 })
            .collect();
        let kept = nms(&disjoint, 0.5);
        assert_eq!(kept.len(), 5);
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn nms_suppresses_at_exact_threshold() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(5.0, 0.0, 15.0, 10.0); // IoU 1/3
        let boxes = [ScoredBox { bbox: a, score: 0.9 }, ScoredBox { bbox: c, score: 0.8 }];
        assert_eq!(nms(&boxes, 1.0 / 3.0).len(), 1);
        assert_eq!(nms(&boxes, 0.34).len(), 2);
    }

    #[test]
    fn nms_ties_follow_input_order() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let boxes = [ScoredBox { bbox: a, score: 0.5 }, ScoredBox { bbox: a, score: 0.5 }];
        assert_eq!(nms_indices(&boxes, 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| Bbox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn decode_inverts_encode(a in arb_box(), g in arb_box()) {
            let d = encode_deltas(&a, &g).unwrap();
            let r = decode_deltas(&a, &d).unwrap();
            for (x, y) in r.to_array().iter().zip(g.to_array()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn nms_is_an_idempotent_subset(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..20),
            thresh in 0.05..1.0f64,
        ) {
            let input: Vec<ScoredBox> = boxes.into_iter().map(|(bbox, score)| ScoredBox { bbox, score }).collect();
            let once = nms(&input, thresh);
            prop_assert!(once.iter().all(|k| input.contains(k)));
            prop_assert_eq!(nms(&once, thresh), once);
        }

        #[test]
        fn capped_nms_is_a_prefix(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..20),
            thresh in 0.05..1.0f64,
            limit in 0usize..8,
        ) {
            let input: Vec<ScoredBox> = boxes.into_iter().map(|(bbox, score)| ScoredBox { bbox, score }).collect();
            let full = nms_indices(&input, thresh);
            let capped = nms_indices_capped(&input, thresh, limit);
            prop_assert_eq!(&full[..full.len().min(limit)], capped.as_slice());
        }
    }
}
