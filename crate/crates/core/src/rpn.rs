//! Region proposals from the attended context map: anchors, heads, target
//! assignment, the two-term loss, and proposal selection.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, encode_deltas, iou, nms_indices_capped, Bbox, ScoredBox};
use crate::numerics::{init, ParamId, ParamStore, Real, Tape, Var};

/// Upper bound on log-scale deltas before decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Reference boxes, `per_cell` shapes per feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// index `k·A + i` is shape `i` centered on cell `k`
    pub anchors: Vec<Bbox>,
    pub per_cell: usize,
    pub grid: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Shapes are enumerated ratio-major: shape `i` has ratio `i / |scales|` and
/// scale `i % |scales|`.
pub fn generate_anchors(grid: usize, stride: f64, ratios: &[f64], scales: &[f64]) -> Result<AnchorSet> {
    if ratios.is_empty() || scales.is_empty() {
        return Err(Error::config("anchor ratios and scales must be non-empty"));
    }
    if ratios.iter().chain(scales).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::config("anchor ratios and scales must be positive"));
    }
    let mut anchors = Vec::with_capacity(grid * grid * ratios.len() * scales.len());
    for row in 0..grid {
        for col in 0..grid {
            let (cx, cy) = (stride * (col as f64 + 0.5), stride * (row as f64 + 0.5));
            for &r in ratios {
                for &s in scales {
                    anchors.push(Bbox::from_center(cx, cy, s * r.sqrt(), s / r.sqrt()));
                }
            }
        }
    }
    Ok(AnchorSet { anchors, per_cell: ratios.len() * scales.len(), grid })
}

#[derive(Clone, Debug)]
pub struct RpnParams {
    conv: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
    pub per_cell: usize,
}

impl RpnParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, hid, a) = (cfg.attn_dim, cfg.rpn_hidden, cfg.anchors_per_cell());
        Ok(RpnParams {
            conv: (
                store.insert("rpn.conv.w", init::he(&[hid, d, 3, 3], d * 9, rng))?,
                store.insert("rpn.conv.b", init::zeros(&[hid]))?,
            ),
            cls: (
                store.insert("rpn.cls.w", init::normal(&[a, hid, 1, 1], 0.01, rng))?,
                store.insert("rpn.cls.b", init::zeros(&[a]))?,
            ),
            reg: (
                store.insert("rpn.reg.w", init::normal(&[4 * a, hid, 1, 1], 0.01, rng))?,
                store.insert("rpn.reg.b", init::zeros(&[4 * a]))?,
            ),
            per_cell: a,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[D_f·A]` pre-sigmoid scores
    pub logits: Var,
    /// `[D_f·A]` in `[0, 1]`
    pub objectness: Var,
    /// `[D_f·A × 4]`
    pub deltas: Var,
}

/// 3×3 conv + ReLU over the `D_a × w_f × w_f` map, then 1×1 objectness and
/// regression heads.
pub fn rpn_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &RpnParams,
    context: Var,
    grid: usize,
) -> Result<RpnOutput> {
    let d = match tape.shape(context) {
        [d, f] if *f == grid * grid => *d,
        s => return Err(Error::shape(format!("rpn: context {s:?} against a {grid}×{grid} grid"))),
    };
    let cells = grid * grid;
    let a = p.per_cell;
    let map = tape.reshape(context, &[d, grid, grid])?;
    let (w, b) = (tape.param(store, p.conv.0), tape.param(store, p.conv.1));
    let hidden = tape.conv2d(map, w, Some(b), 1, 1)?;
    let hidden = tape.relu(hidden);

    let (w, b) = (tape.param(store, p.cls.0), tape.param(store, p.cls.1));
    let cls = tape.conv2d(hidden, w, Some(b), 1, 0)?;
    let cls = tape.reshape(cls, &[a, cells])?;
    let cls = tape.transpose(cls)?;
    let logits = tape.reshape(cls, &[cells * a])?;
    let objectness = tape.sigmoid(logits);

    let (w, b) = (tape.param(store, p.reg.0), tape.param(store, p.reg.1));
    let reg = tape.conv2d(hidden, w, Some(b), 1, 0)?;
    let reg = tape.reshape(reg, &[4 * a, cells])?;
    let reg = tape.transpose(reg)?;
    let deltas = tape.reshape(reg, &[cells * a, 4])?;
    Ok(RpnOutput { logits, objectness, deltas })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// argmax-IoU ground truth for positives
    pub matched: Vec<Option<usize>>,
    /// regression targets for positives
    pub deltas: Vec<Option<[f64; 4]>>,
}

impl RpnTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == AnchorLabel::Positive).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == AnchorLabel::Negative).map(|(i, _)| i)
    }
}

/// Labels anchors against the phrase's ground truth: positive at IoU ≥
/// `pos_iou` or when an anchor is the best match of some gt, negative below
/// `neg_iou`, ignored otherwise.
pub fn assign_rpn_targets(anchors: &AnchorSet, gts: &[Bbox], pos_iou: f64, neg_iou: f64) -> Result<RpnTargets> {
    if gts.is_empty() {
        return Err(Error::contract("rpn targets: a phrase needs at least one ground-truth box"));
    }
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut overlaps = Vec::with_capacity(n * gts.len());
    for (i, a) in anchors.anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            overlaps.push(v);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = g;
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut labels: Vec<AnchorLabel> = best_iou
        .iter()
        .map(|&v| if v >= pos_iou { AnchorLabel::Positive } else if v < neg_iou { AnchorLabel::Negative } else { AnchorLabel::Ignore })
        .collect();
    for (g, &best) in gt_best.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for i in 0..n {
            if overlaps[i * gts.len() + g] == best {
                labels[i] = AnchorLabel::Positive;
            }
        }
    }
    let mut matched = vec![None; n];
    let mut deltas = vec![None; n];
    for i in 0..n {
        if labels[i] == AnchorLabel::Positive {
            matched[i] = Some(best_gt[i]);
            deltas[i] = Some(encode_deltas(&anchors.anchors[i], &gts[best_gt[i]])?);
        }
    }
    Ok(RpnTargets { labels, matched, deltas })
}

/// Loss value plus its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
}

/// Samples up to `batch` anchors with at most `pos_fraction` positives and
/// returns `(positives, negatives)`.
pub fn sample_anchors(
    targets: &RpnTargets,
    batch: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = targets.positives().collect();
    let mut neg: Vec<usize> = targets.negatives().collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(((batch as f64) * pos_fraction).floor() as usize);
    neg.truncate(batch - pos.len());
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Mean binary cross-entropy over the sampled anchors plus smooth-L1 on the
/// sampled positives, each averaged over its own count.
pub fn rpn_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &RpnOutput,
    targets: &RpnTargets,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let (pos, neg) = sample_anchors(targets, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    rpn_loss_on(tape, out, targets, &pos, &neg, cfg.rpn_beta)
}

/// [`rpn_loss`] on an explicit anchor sample.
pub fn rpn_loss_on<T: Real>(
    tape: &mut Tape<T>,
    out: &RpnOutput,
    targets: &RpnTargets,
    pos: &[usize],
    neg: &[usize],
    beta: f64,
) -> Result<LossTerms> {
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::contract("rpn loss: no positive or negative anchors"));
    }
    let picks: Vec<(usize, T)> =
        pos.iter().map(|&i| (i, T::one())).chain(neg.iter().map(|&i| (i, T::zero()))).collect();
    let cls = tape.bce_with_logits(out.logits, &picks)?;
    let cls_value = tape.scalar(cls).as_f64();
    if pos.is_empty() {
        return Ok(LossTerms { total: cls, cls: cls_value, reg: 0.0 });
    }
    let rows = pos
        .iter()
        .map(|&i| {
            let d = targets.deltas[i].ok_or_else(|| Error::contract(format!("rpn loss: anchor {i} is not positive")))?;
            Ok((i, d.iter().map(|&v| T::of(v)).collect()))
        })
        .collect::<Result<Vec<(usize, Vec<T>)>>>()?;
    let reg = tape.smooth_l1(out.deltas, &rows, T::of(beta))?;
    let reg_value = tape.scalar(reg).as_f64();
    let total = tape.add(cls, reg)?;
    Ok(LossTerms { total, cls: cls_value, reg: reg_value })
}

/// Decodes every anchor, clips to the image, drops boxes thinner than one
/// pixel, and keeps the top `top_n` survivors of NMS at `nms_iou`.
pub fn select_proposals(
    objectness: &[f64],
    deltas: &[f64],
    anchors: &AnchorSet,
    image_size: f64,
    nms_iou: f64,
    top_n: usize,
) -> Result<Vec<ScoredBox>> {
    if objectness.len() != anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(Error::shape(format!(
            "proposals: {} scores and {} deltas for {} anchors",
            objectness.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let d = &deltas[4 * i..4 * i + 4];
        let d = [d[0], d[1], d[2].min(MAX_LOG_SCALE), d[3].min(MAX_LOG_SCALE)];
        let Ok(b) = decode_deltas(anchor, &d) else { continue };
        let b = b.clip(image_size);
        if b.width() < 1.0 || b.height() < 1.0 || !objectness[i].is_finite() {
            continue;
        }
        boxes.push(ScoredBox { bbox: b, score: objectness[i] });
    }
    Ok(nms_indices_capped(&boxes, nms_iou, top_n).into_iter().map(|i| boxes[i]).collect())
}

/// Percentage of queries whose every ground-truth box is matched at `iou_thresh`
/// by at least one of the first `n` proposals.
pub fn hit_rate(proposals: &[Vec<ScoredBox>], gts: &[Vec<Bbox>], n: usize, iou_thresh: f64) -> Result<f64> {
    if n < 1 {
        return Err(Error::config("hit rate needs N ≥ 1"));
    }
    if proposals.len() != gts.len() {
        return Err(Error::shape(format!("hit rate: {} proposal lists for {} queries", proposals.len(), gts.len())));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let hits = proposals
        .iter()
        .zip(gts)
        .filter(|(props, gt)| {
            let top = &props[..props.len().min(n)];
            gt.iter().all(|g| top.iter().any(|p| iou(&p.bbox, g) >= iou_thresh))
        })
        .count();
    Ok(100.0 * hits as f64 / gts.len() as f64)
}
