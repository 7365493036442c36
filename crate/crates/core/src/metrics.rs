//! Recall@K and 11-point average precision over grounding results.

use std::fmt::Write as _;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, Bbox};

/// Detections for one query, sorted by relatedness, and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    detections: Vec<Detection>,
    gts: Vec<Bbox>,
}

impl QueryResult {
    /// Sorts detections by descending relatedness; ties keep input order.
    pub fn new(mut detections: Vec<Detection>, gts: Vec<Bbox>) -> Result<Self> {
        if gts.is_empty() {
            return Err(Error::contract("query result needs at least one ground-truth box"));
        }
        detections.sort_by(|a, b| b.relatedness.total_cmp(&a.relatedness));
        Ok(QueryResult { detections, gts })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn gts(&self) -> &[Bbox] {
        &self.gts
    }
}

/// Percentage of queries with a top-`k` detection at IoU ≥ `iou_thresh` to any gt.
pub fn recall_at_k(results: &[QueryResult], k: usize, iou_thresh: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::config("recall@K needs K ≥ 1"));
    }
    if results.is_empty() {
        return Err(Error::contract("recall@K over an empty result set"));
    }
    let hits = results
        .iter()
        .filter(|q| {
            q.detections
                .iter()
                .take(k)
                .any(|d| q.gts.iter().any(|g| iou(&d.bbox, g) >= iou_thresh))
        })
        .count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// True/false-positive flags of the pooled detections in score order, and
/// the total gt count.
pub fn match_detections(results: &[QueryResult], iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut pooled: Vec<(usize, usize)> = Vec::new();
    for (q, r) in results.iter().enumerate() {
        pooled.extend((0..r.detections.len()).map(|i| (q, i)));
    }
    pooled.sort_by(|a, b| {
        let (sa, sb) = (results[a.0].detections[a.1].relatedness, results[b.0].detections[b.1].relatedness);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = results.iter().map(|r| vec![false; r.gts.len()]).collect();
    let mut flags = Vec::with_capacity(pooled.len());
    for (q, i) in pooled {
        let det = &results[q].detections[i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in results[q].gts.iter().enumerate() {
            if used[q][g] {
                continue;
            }
            let v = iou(det, gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[q][g] = true;
        }
        flags.push(best.is_some());
    }
    let total = results.iter().map(|r| r.gts.len()).sum();
    (flags, total)
}

/// Mean over recall levels `0, 0.1, …, 1` of the best precision reached at
/// or beyond that recall.
pub fn average_precision_11pt(results: &[QueryResult], iou_thresh: f64) -> f64 {
    let (flags, total) = match_detections(results, iou_thresh);
    if total == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / total as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// The four headline numbers for one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub map: f64,
    pub queries: usize,
}

pub fn map_report(results: &[QueryResult]) -> Result<MapReport> {
    Ok(MapReport {
        r_at_1: recall_at_k(results, 1, 0.5)?,
        r_at_5: recall_at_k(results, 5, 0.5)?,
        r_at_10: recall_at_k(results, 10, 0.5)?,
        map: average_precision_11pt(results, 0.5),
        queries: results.len(),
    })
}

impl MapReport {
    pub fn csv_header() -> &'static str {
        "queries,r_at_1,r_at_5,r_at_10,map"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{:.4},{:.4},{:.6}", self.queries, self.r_at_1, self.r_at_5, self.r_at_10, self.map)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8}", "metric", "value");
        for (name, v) in [("R@1", self.r_at_1), ("R@5", self.r_at_5), ("R@10", self.r_at_10)] {
            let _ = writeln!(s, "{name:<8} {v:>8.2}");
        }
        let _ = writeln!(s, "{:<8} {:>8.4}", "mAP", self.map);
        let _ = writeln!(s, "{:<8} {:>8}", "queries", self.queries);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Bbox {
        Bbox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn det(x: f64, s: f64) -> Detection {
        Detection { bbox: b(x), relatedness: s }
    }

    #[test]
    fn recall_examples() {
        let perfect = vec![QueryResult::new(vec![det(0.0, 0.9)], vec![b(0.0)]).unwrap(); 3];
        assert_eq!(recall_at_k(&perfect, 1, 0.5).unwrap(), 100.0);
        let none = vec![QueryResult::new(vec![], vec![b(0.0)]).unwrap(); 3];
        assert_eq!(recall_at_k(&none, 1, 0.5).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&[], 1, 0.5), Err(Error::Contract(_))));
        assert!(recall_at_k(&perfect, 0, 0.5).is_err());

        // hits at ranks 1, 3, 7 and never
        let ranked = |hit: Option<usize>| {
            let dets = (0..8)
                .map(|r| det(if Some(r + 1) == hit { 0.0 } else { 100.0 }, 1.0 - r as f64 / 10.0))
                .collect();
            QueryResult::new(dets, vec![b(0.0)]).unwrap()
        };
        let qs = [ranked(Some(1)), ranked(Some(3)), ranked(Some(7)), ranked(None)];
        assert_eq!(recall_at_k(&qs, 5, 0.5).unwrap(), 50.0);
        assert_eq!(recall_at_k(&qs, 1, 0.5).unwrap(), 25.0);
        assert_eq!(recall_at_k(&qs, 10, 0.5).unwrap(), 75.0);
    }

    #[test]
    fn ap_examples() {
        let one = [QueryResult::new(vec![det(0.0, 0.7)], vec![b(0.0)]).unwrap()];
        assert_eq!(average_precision_11pt(&one, 0.5), 1.0);
        let miss = [QueryResult::new(vec![det(50.0, 0.7)], vec![b(0.0)]).unwrap()];
        assert_eq!(average_precision_11pt(&miss, 0.5), 0.0);
        let q = QueryResult::new(vec![det(0.0, 0.9), det(50.0, 0.8), det(100.0, 0.7)], vec![b(0.0), b(100.0)]).unwrap();
        let expect = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
        assert!((average_precision_11pt(&[q], 0.5) - expect).abs() < 1e-12);
        assert!((expect - 0.8485).abs() < 1e-4);
    }

    #[test]
    fn duplicate_detections_match_one_gt() {
        let q = QueryResult::new(vec![det(0.0, 0.9), det(0.0, 0.8)], vec![b(0.0)]).unwrap();
        let (flags, total) = match_detections(&[q], 0.5);
        assert_eq!(flags, vec![true, false]);
        assert_eq!(total, 1);
    }

    #[test]
    fn report_examples() {
        let perfect = vec![QueryResult::new(vec![det(0.0, 0.9)], vec![b(0.0)]).unwrap(); 2];
        let r = map_report(&perfect).unwrap();
        assert_eq!((r.r_at_1, r.r_at_5, r.r_at_10, r.map), (100.0, 100.0, 100.0, 1.0));
        let empty = vec![QueryResult::new(vec![], vec![b(0.0)]).unwrap(); 2];
        let r = map_report(&empty).unwrap();
        assert_eq!((r.r_at_1, r.r_at_5, r.r_at_10, r.map), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.csv_row(), "2,0.0000,0.0000,0.0000,0.000000");
        assert!(r.to_text().contains("mAP"));
    }

    #[test]
    fn sorting_is_enforced() {
        let q = QueryResult::new(vec![det(0.0, 0.1), det(20.0, 0.9)], vec![b(0.0)]).unwrap();
        assert_eq!(q.detections()[0].relatedness, 0.9);
        assert!(QueryResult::new(vec![], vec![]).is_err());
    }
}
