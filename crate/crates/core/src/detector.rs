//! Region classifier over the attended context: ROI alignment, relatedness
//! and refinement heads, target sampling, and final suppression.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, encode_deltas, iou, nms_indices, Bbox, ScoredBox};
use crate::numerics::{init, GridRect, ParamId, ParamStore, Real, Tape, Var};
use crate::rpn::{LossTerms, MAX_LOG_SCALE};

/// Regression targets are multiplied by these before the loss and divided
/// out when decoding.
pub const DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// A grounded region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Bbox,
    pub relatedness: f64,
}

/// Maps a pixel-space box onto the feature grid of the given stride, where
/// grid point `j` sits at the pixel center `stride·(j + 0.5)`.
pub fn to_grid(b: &Bbox, stride: f64) -> GridRect {
    GridRect {
        x1: b.x1 / stride - 0.5,
        y1: b.y1 / stride - 0.5,
        x2: b.x2 / stride - 0.5,
        y2: b.y2 / stride - 0.5,
    }
}

/// Bilinear `P×P` pooling of `context[D_a × D_f]` inside each roi. Output is
/// `[R × D_a·P·P]`.
pub fn roi_align<T: Real>(
    tape: &mut Tape<T>,
    context: Var,
    grid: usize,
    rois: &[Bbox],
    bins: usize,
    stride: f64,
) -> Result<Var> {
    let d = match tape.shape(context) {
        [d, f] if *f == grid * grid => *d,
        s => return Err(Error::shape(format!("roi_align: context {s:?} against a {grid}×{grid} grid"))),
    };
    if let Some(bad) = rois.iter().find(|r| !r.is_valid()) {
        return Err(Error::contract(format!("roi_align: degenerate roi {bad:?}")));
    }
    let map = tape.reshape(context, &[d, grid, grid])?;
    let rects: Vec<GridRect> = rois.iter().map(|r| to_grid(r, stride)).collect();
    tape.roi_align(map, &rects, bins)
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

impl DetectorParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let input = cfg.attn_dim * cfg.roi_bins * cfg.roi_bins;
        let hid = cfg.det_hidden;
        Ok(DetectorParams {
            fc1: (
                store.insert("det.fc1.w", init::he(&[input, hid], input, rng))?,
                store.insert("det.fc1.b", init::zeros(&[hid]))?,
            ),
            fc2: (
                store.insert("det.fc2.w", init::he(&[hid, hid], hid, rng))?,
                store.insert("det.fc2.b", init::zeros(&[hid]))?,
            ),
            cls: (
                store.insert("det.cls.w", init::normal(&[hid, 2], 0.01, rng))?,
                store.insert("det.cls.b", init::zeros(&[2]))?,
            ),
            reg: (
                store.insert("det.reg.w", init::normal(&[hid, 4], 0.001, rng))?,
                store.insert("det.reg.b", init::zeros(&[4]))?,
            ),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    /// `[R × 2]`, column 1 is "related"
    pub logits: Var,
    /// `[R × 4]`, weighted by [`DELTA_WEIGHTS`]
    pub deltas: Var,
}

fn dense<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, layer: (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (tape.param(store, layer.0), tape.param(store, layer.1));
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Two fully connected ReLU layers, then the 2-way and 4-delta heads.
pub fn detector_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DetectorParams,
    pooled: Var,
) -> Result<DetectorOutput> {
    let h = dense(tape, store, pooled, p.fc1)?;
    let h = tape.relu(h);
    let h = dense(tape, store, h, p.fc2)?;
    let h = tape.relu(h);
    let logits = dense(tape, store, h, p.cls)?;
    let deltas = dense(tape, store, h, p.reg)?;
    Ok(DetectorOutput { logits, deltas })
}

/// Softmax probability of the "related" class for each roi.
pub fn relatedness<T: Real>(tape: &mut Tape<T>, out: &DetectorOutput) -> Result<Vec<f64>> {
    let probs = tape.softmax(out.logits)?;
    Ok(tape.value(probs).chunks(2).map(|p| p[1].as_f64()).collect())
}

/// Sampled training rois with labels and weighted regression targets.
#[derive(Clone, Debug, Default)]
pub struct DetTargets {
    pub rois: Vec<Bbox>,
    pub related: Vec<bool>,
    pub deltas: Vec<Option<[f64; 4]>>,
}

/// Labels every roi: related at IoU ≥ `fg_iou` with some gt, with weighted
/// deltas toward its best gt.
pub fn label_rois(rois: &[Bbox], gts: &[Bbox], fg_iou: f64) -> Result<DetTargets> {
    if gts.is_empty() {
        return Err(Error::contract("detector targets: a phrase needs at least one ground-truth box"));
    }
    let mut t = DetTargets::default();
    for roi in rois {
        let (g, best) = gts
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, iou(roi, gt)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let related = best >= fg_iou;
        t.rois.push(*roi);
        t.related.push(related);
        t.deltas.push(if related {
            let d = encode_deltas(roi, &gts[g])?;
            Some([0, 1, 2, 3].map(|k| d[k] * DELTA_WEIGHTS[k]))
        } else {
            None
        });
    }
    Ok(t)
}

/// Appends the gt boxes to the proposals, labels everything, and samples up
/// to `batch` rois with at most `pos_fraction` related.
pub fn assign_det_targets(
    proposals: &[Bbox],
    gts: &[Bbox],
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<DetTargets> {
    let mut rois = proposals.to_vec();
    rois.extend_from_slice(gts);
    let all = label_rois(&rois, gts, cfg.det_fg_iou)?;
    let mut pos: Vec<usize> = (0..rois.len()).filter(|&i| all.related[i]).collect();
    let mut neg: Vec<usize> = (0..rois.len()).filter(|&i| !all.related[i]).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(((cfg.det_batch as f64) * cfg.det_pos_fraction).floor().max(1.0) as usize);
    neg.truncate(cfg.det_batch.saturating_sub(pos.len()));
    let mut keep: Vec<usize> = pos.into_iter().chain(neg).collect();
    keep.sort_unstable();
    Ok(DetTargets {
        rois: keep.iter().map(|&i| all.rois[i]).collect(),
        related: keep.iter().map(|&i| all.related[i]).collect(),
        deltas: keep.iter().map(|&i| all.deltas[i]).collect(),
    })
}

/// Mean 2-way cross-entropy over all rois plus mean smooth-L1 over related ones.
pub fn det_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &DetectorOutput,
    targets: &DetTargets,
    beta: f64,
) -> Result<LossTerms> {
    if targets.rois.is_empty() {
        return Err(Error::contract("detector loss: no sampled rois"));
    }
    let rows: Vec<(usize, usize)> = targets.related.iter().enumerate().map(|(i, &r)| (i, usize::from(r))).collect();
    let cls = tape.cross_entropy(out.logits, &rows)?;
    let cls_value = tape.scalar(cls).as_f64();
    let reg_rows: Vec<(usize, Vec<T>)> = targets
        .deltas
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|d| (i, d.iter().map(|&v| T::of(v)).collect())))
        .collect();
    if reg_rows.is_empty() {
        return Ok(LossTerms { total: cls, cls: cls_value, reg: 0.0 });
    }
    let reg = tape.smooth_l1(out.deltas, &reg_rows, T::of(beta))?;
    let reg_value = tape.scalar(reg).as_f64();
    let total = tape.add(cls, reg)?;
    Ok(LossTerms { total, cls: cls_value, reg: reg_value })
}

/// Refines each proposal, clips, keeps relatedness ≥ `threshold`, and
/// suppresses overlaps at `nms_iou`. Every survivor is returned.
pub fn postprocess(
    relatedness: &[f64],
    deltas: &[f64],
    proposals: &[Bbox],
    image_size: f64,
    threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if relatedness.len() != proposals.len() || deltas.len() != 4 * proposals.len() {
        return Err(Error::shape(format!(
            "postprocess: {} scores and {} deltas for {} proposals",
            relatedness.len(),
            deltas.len(),
            proposals.len()
        )));
    }
    let mut cands = Vec::new();
    for (i, prop) in proposals.iter().enumerate() {
        if !(relatedness[i] >= threshold) {
            continue;
        }
        let d = &deltas[4 * i..4 * i + 4];
        let d = [
            d[0] / DELTA_WEIGHTS[0],
            d[1] / DELTA_WEIGHTS[1],
            (d[2] / DELTA_WEIGHTS[2]).min(MAX_LOG_SCALE),
            (d[3] / DELTA_WEIGHTS[3]).min(MAX_LOG_SCALE),
        ];
        let Ok(b) = decode_deltas(prop, &d) else { continue };
        let b = b.clip(image_size);
        if b.width() < 1.0 || b.height() < 1.0 {
            continue;
        }
        cands.push(ScoredBox { bbox: b, score: relatedness[i] });
    }
    Ok(nms_indices(&cands, nms_iou)
        .into_iter()
        .map(|i| Detection { bbox: cands[i].bbox, relatedness: cands[i].score })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Coverage, Tensor};
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { attn_dim: 2, roi_bins: 2, det_hidden: 5, ..ModelConfig::desk() }
    }

    #[test]
    fn roi_align_examples() {
        let mut tape = Tape::<f64>::inference();
        let c = tape.constant(Tensor::full(&[2, 16], 5.0));
        let out = roi_align(&mut tape, c, 4, &[b(3.0, 7.0, 50.0, 40.0)], 3, 16.0).unwrap();
        assert_eq!(tape.shape(out), [1, 18]);
        assert!(tape.value(out).iter().all(|&v| (v - 5.0).abs() < 1e-12));

        // one bin centered on grid point (1, 2), i.e. pixel (40, 24)
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let c = tape.constant(Tensor::from_f64(&[1, 16], &vals).unwrap());
        let out = roi_align(&mut tape, c, 4, &[b(36.0, 20.0, 44.0, 28.0)], 1, 16.0).unwrap();
        assert_eq!(tape.value(out), [6.0]);

        // halfway between a 0 and a 1
        let mut ramp = vec![0.0; 16];
        ramp[1] = 1.0;
        let c = tape.constant(Tensor::from_f64(&[1, 16], &ramp).unwrap());
        let out = roi_align(&mut tape, c, 4, &[b(12.0, 4.0, 20.0, 12.0)], 1, 16.0).unwrap();
        assert!((tape.value(out)[0] - 0.5).abs() < 1e-12);

        let flat = Bbox { x1: 5.0, y1: 5.0, x2: 5.0, y2: 9.0 };
        assert!(matches!(roi_align(&mut tape, c, 4, &[flat], 2, 16.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_heads_are_undecided() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = DetectorParams::init(&mut store, &cfg, &mut SplitMix64::seed_from_u64(1)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::inference();
        let pooled = tape.constant(init::normal::<f64>(&[3, 8], 1.0, &mut SplitMix64::seed_from_u64(2)));
        let out = detector_forward(&mut tape, &store, &p, pooled).unwrap();
        assert_eq!(relatedness(&mut tape, &out).unwrap(), vec![0.5; 3]);
        assert!(tape.value(out.deltas).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_pair_is_a_distribution() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = DetectorParams::init(&mut store, &cfg, &mut SplitMix64::seed_from_u64(4)).unwrap();
        let mut tape = Tape::inference();
        let pooled = tape.constant(init::normal::<f64>(&[4, 8], 3.0, &mut SplitMix64::seed_from_u64(5)));
        let out = detector_forward(&mut tape, &store, &p, pooled).unwrap();
        let probs = tape.softmax(out.logits).unwrap();
        for pair in tape.value(probs).chunks(2) {
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_through_roi_align_wrt_context() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = DetectorParams::init(&mut store, &cfg, &mut SplitMix64::seed_from_u64(6)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".b") {
                store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 + 0.01 * i as f64);
            }
            store.get_mut(id).requires_grad = false;
        }
        let ctx = store.insert("ctx", init::normal::<f64>(&[2, 16], 1.0, &mut SplitMix64::seed_from_u64(7))).unwrap();
        let rois = [b(3.0, 5.0, 37.0, 29.0), b(20.0, 18.0, 61.0, 50.0)];
        let report = grad_check(&store, 1e-5, Coverage::All, |tape, s| {
            let c = tape.param(s, ctx);
            let pooled = roi_align(tape, c, 4, &rois, 2, 16.0)?;
            let out = detector_forward(tape, s, &p, pooled)?;
            let cls = tape.cross_entropy(out.logits, &[(0, 1), (1, 0)])?;
            let reg = tape.smooth_l1(out.deltas, &[(0, vec![0.5, -0.5, 0.2, 0.1])], 1.0)?;
            tape.add(cls, reg)
        })
        .unwrap();
        assert_eq!(report.checked, 32);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn labeling_examples() {
        let gt = b(10.0, 10.0, 30.0, 30.0);
        let half = b(10.0, 10.0, 30.0, 50.0); // IoU exactly 0.5
        let far = b(60.0, 60.0, 90.0, 90.0);
        let t = label_rois(&[gt, half, far], &[gt], 0.5).unwrap();
        assert_eq!(t.related, vec![true, true, false]);
        assert_eq!(t.deltas[0], Some([0.0; 4]));
        assert!(t.deltas[2].is_none());
        assert!(label_rois(&[gt], &[], 0.5).is_err());
    }

    #[test]
    fn sampling_caps_and_includes_gts() {
        let cfg = ModelConfig::desk();
        let gts = [b(10.0, 10.0, 40.0, 40.0)];
        let mut proposals = Vec::new();
        for i in 0..150 {
            let o = (i % 10) as f64;
            proposals.push(b(o * 9.0, o * 7.0, o * 9.0 + 30.0, o * 7.0 + 30.0));
        }
        let t = assign_det_targets(&proposals, &gts, &cfg, &mut SplitMix64::seed_from_u64(3)).unwrap();
        assert!(t.rois.len() <= 64);
        assert!(t.related.iter().filter(|&&r| r).count() <= 16);
        assert!(t.related.iter().any(|&r| r));
        // with no proposals, the gt is the only roi
        let t = assign_det_targets(&[], &gts, &cfg, &mut SplitMix64::seed_from_u64(3)).unwrap();
        assert_eq!(t.rois, gts.to_vec());
        assert_eq!(t.related, vec![true]);
    }

    #[test]
    fn loss_examples() {
        let gt = b(10.0, 10.0, 30.0, 30.0);
        let t = label_rois(&[gt, b(60.0, 60.0, 90.0, 90.0)], &[gt], 0.5).unwrap();
        let mut tape = Tape::<f64>::inference();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let deltas = tape.constant(Tensor::zeros(&[2, 4]));
        let l = det_loss(&mut tape, &DetectorOutput { logits, deltas }, &t, 1.0).unwrap();
        assert!((l.cls - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);
        let logits = tape.constant(Tensor::from_f64(&[2, 2], &[-40.0, 40.0, 40.0, -40.0]).unwrap());
        let l = det_loss(&mut tape, &DetectorOutput { logits, deltas }, &t, 1.0).unwrap();
        assert!(tape.scalar(l.total) < 1e-12);
        assert!(det_loss(&mut tape, &DetectorOutput { logits, deltas }, &DetTargets::default(), 1.0).is_err());
    }

    #[test]
    fn postprocess_examples() {
        let a = b(10.0, 10.0, 30.0, 30.0);
        let c = b(80.0, 80.0, 110.0, 100.0);
        let zeros = vec![0.0; 12];
        let dets = postprocess(&[0.9, 0.8, 0.2], &zeros, &[a, c, a], 128.0, 0.5, 0.4).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0], Detection { bbox: a, relatedness: 0.9 });
        assert!(postprocess(&[0.1, 0.2], &zeros[..8], &[a, c], 128.0, 0.5, 0.4).unwrap().is_empty());
        let dup = postprocess(&[0.9, 0.95], &zeros[..8], &[a, a], 128.0, 0.5, 0.4).unwrap();
        assert_eq!(dup.len(), 1);
        assert_eq!(dup[0].relatedness, 0.95);
        // refinement applies the weighted deltas and clips to the image
        let shifted = postprocess(&[0.9], &[10.0, 0.0, 0.0, 0.0], &[b(100.0, 0.0, 120.0, 20.0)], 128.0, 0.5, 0.4).unwrap();
        assert_eq!(shifted[0].bbox, b(120.0, 0.0, 128.0, 20.0));
    }
}
