//! The assembled grounding network: visual features, phrase encoder and
//! decoder, attention, proposal network and relatedness detector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::attention::{self, AttentionParams, AttentionStep};
use crate::backbone::{self, BackboneParams, VisualFeatures};
use crate::config::ModelConfig;
use crate::data::synth::derive_seed;
use crate::data::Image;
use crate::detector::{self, Detection, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{Bbox, ScoredBox};
use crate::langmodel::{self, BiGruParams, EncoderParams};
use crate::numerics::{init, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::rpn::{self, AnchorSet, RpnParams};
use crate::textproc::{self, EmbeddingTable, TokenizedPhrase, Vocabulary};

/// Feature stride of the backbone.
pub const STRIDE: f64 = 16.0;

/// Handles for every parameter block.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    /// `[|V| × D_w]`
    pub embed: ParamId,
    pub encoder: EncoderParams,
    pub decoder: BiGruParams,
    pub attention: AttentionParams,
    /// `[|V| × D_a]`
    pub w_p: ParamId,
    pub rpn: RpnParams,
    pub det: DetectorParams,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub params: ModelParams,
    pub anchors: AnchorSet,
}

/// Everything computed from one phrase on top of the visual features.
#[derive(Clone, Debug)]
pub struct Grounding {
    /// global phrase embedding `[D_a]`
    pub global: Var,
    /// one step per non-pad position
    pub steps: Vec<AttentionStep>,
    /// `[T × |V|]` for the non-pad positions
    pub logits: Var,
    /// `[D_a × D_f]`
    pub c_hat: Var,
    /// what the proposal network sees: `c_hat`, or `v_a` under variation (c)
    pub rpn_input: Var,
}

/// Weighted total and its unweighted parts.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub caption: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, cfg: &ModelConfig) -> f64 {
        cfg.lambda_cap * self.caption
            + cfg.lambda_rpn * (self.rpn_cls + self.rpn_reg)
            + cfg.lambda_det * (self.det_cls + self.det_reg)
    }
}

/// Inference output for one phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// sorted by relatedness, in input-image pixels
    pub detections: Vec<Detection>,
    /// the top proposals after NMS, in input-image pixels
    pub proposals: Vec<ScoredBox>,
    /// `α_t` for each non-pad position
    pub alphas: Vec<Vec<f64>>,
    /// mean of the `α_t`
    pub mean_alpha: Vec<f64>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters from `cfg.seed`. Word vectors come from
    /// `cfg.embedding_file` unless it is unset or variation (a) is active.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::seed_from_u64(derive_seed(cfg.seed, 0x6d6f_64656c, 0));
        let table = match (&cfg.embedding_file, cfg.ablation.no_embedding_file) {
            (Some(path), false) => textproc::load_embeddings(Path::new(path), &vocab, cfg.word_dim, &mut rng)?,
            _ => EmbeddingTable::random(&vocab, cfg.word_dim, cfg.embedding_std, &mut rng)?,
        };
        Self::with_embeddings(cfg, vocab, table, &mut rng)
    }

    pub fn with_embeddings(
        cfg: ModelConfig,
        vocab: Vocabulary,
        table: EmbeddingTable<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if table.matrix.shape() != [vocab.len(), cfg.word_dim] {
            return Err(Error::shape(format!(
                "embedding table {:?} for a vocabulary of {} and D_w = {}",
                table.matrix.shape(),
                vocab.len(),
                cfg.word_dim
            )));
        }
        let (de, da, dw) = (cfg.visual_dim, cfg.attn_dim, cfg.word_dim);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::init(&mut store, &cfg, rng)?;
        let embed = store.insert("embed.table", table.matrix)?;
        let encoder = EncoderParams::init(&mut store, dw + de, da, rng)?;
        let decoder = BiGruParams::init(&mut store, "decoder", dw + de + da, da, rng)?;
        let attention = AttentionParams::init(&mut store, da, cfg.cells(), !cfg.ablation.no_global_h, rng)?;
        let w_p = store.insert("word.w_p", init::glorot(&[vocab.len(), da], da, vocab.len(), rng))?;
        let rpn = RpnParams::init(&mut store, &cfg, rng)?;
        let det = DetectorParams::init(&mut store, &cfg, rng)?;
        let anchors = rpn::generate_anchors(cfg.grid(), STRIDE, &cfg.anchor_ratios, &cfg.anchor_scales)?;
        let params = ModelParams { backbone, embed, encoder, decoder, attention, w_p, rpn, det };
        Ok(Model { cfg, vocab, store, params, anchors })
    }

    pub fn tokenize(&self, phrase: &str) -> Result<TokenizedPhrase> {
        textproc::tokenize(phrase, &self.vocab, self.cfg.max_len)
    }

    /// Backbone and projections for an `S×S` image.
    pub fn visual(&self, tape: &mut Tape<T>, image: &Image) -> Result<VisualFeatures> {
        let s = self.cfg.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Input(format!(
                "image is {}×{}, the model expects {s}×{s}",
                image.height(),
                image.width()
            )));
        }
        let x = tape.constant(backbone::network_input(image, self.cfg.coord_channels));
        let raw = backbone::extract_features(tape, &self.store, &self.params.backbone, x)?;
        backbone::project_visual(tape, &self.store, &self.params.backbone, raw)
    }

    /// Encodes the phrase against the image, attends at every non-pad step
    /// and averages the contexts.
    pub fn ground(&self, tape: &mut Tape<T>, vis: &VisualFeatures, tokens: &TokenizedPhrase) -> Result<Grounding> {
        let p = &self.params;
        let n = tokens.max_len();
        let table = tape.param(&self.store, p.embed);
        let words = textproc::embed(tape, table, tokens)?;
        let visual = tape.repeat_rows(vis.v_g, n)?;
        let x_seq = tape.hconcat(words, visual)?;
        let enc = langmodel::encode(tape, &self.store, &p.encoder, x_seq)?;
        let h_seq = langmodel::decode(tape, &self.store, &p.decoder, x_seq, enc.h)?;
        let global = (!self.cfg.ablation.no_global_h).then_some(enc.h);
        let prep = attention::prepare(tape, &self.store, &p.attention, vis.v_a, global)?;
        let mut steps = Vec::with_capacity(tokens.true_length);
        for t in 0..tokens.true_length {
            let h_t = tape.row(h_seq, t)?;
            steps.push(attention::step(tape, &self.store, &p.attention, &prep, h_t)?);
        }
        let contexts: Vec<Var> = steps.iter().map(|s| s.context).collect();
        let w_p = tape.param(&self.store, p.w_p);
        let logits = langmodel::word_logits_seq(tape, w_p, h_seq, &contexts)?;
        let c_hat = attention::average_context(tape, &steps, tokens.true_length)?.c_hat;
        let rpn_input = if self.cfg.ablation.rpn_without_attention { vis.v_a } else { c_hat };
        Ok(Grounding { global: enc.h, steps, logits, c_hat, rpn_input })
    }

    /// Proposal network scores and the top proposals after NMS.
    fn propose(&self, tape: &mut Tape<T>, g: &Grounding) -> Result<(rpn::RpnOutput, Vec<ScoredBox>)> {
        let out = rpn::rpn_forward(tape, &self.store, &self.params.rpn, g.rpn_input, self.cfg.grid())?;
        let obj: Vec<f64> = tape.value(out.objectness).iter().map(|v| v.as_f64()).collect();
        let deltas: Vec<f64> = tape.value(out.deltas).iter().map(|v| v.as_f64()).collect();
        let proposals = rpn::select_proposals(
            &obj,
            &deltas,
            &self.anchors,
            self.cfg.image_size as f64,
            self.cfg.rpn_nms,
            self.cfg.num_proposals,
        )?;
        Ok((out, proposals))
    }

    fn detect(&self, tape: &mut Tape<T>, g: &Grounding, rois: &[Bbox]) -> Result<detector::DetectorOutput> {
        let pooled = detector::roi_align(tape, g.c_hat, self.cfg.grid(), rois, self.cfg.roi_bins, STRIDE)?;
        detector::detector_forward(tape, &self.store, &self.params.det, pooled)
    }

    /// `λ_cap·L_caption + λ_rpn·L_rpn + λ_det·L_det` for one phrase and its
    /// ground truth. Terms with a zero weight are not built at all.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        vis: &VisualFeatures,
        tokens: &TokenizedPhrase,
        gts: &[Bbox],
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        if gts.is_empty() {
            return Err(Error::contract("training sample without ground-truth boxes"));
        }
        let cfg = &self.cfg;
        let g = self.ground(tape, vis, tokens)?;
        let mut terms = Vec::new();
        let mut out = LossBreakdown { total: g.logits, caption: 0.0, rpn_cls: 0.0, rpn_reg: 0.0, det_cls: 0.0, det_reg: 0.0 };
        if cfg.lambda_cap > 0.0 {
            let cap = langmodel::caption_loss(tape, g.logits, tokens)?;
            out.caption = tape.scalar(cap).as_f64();
            terms.push(tape.scale(cap, T::of(cfg.lambda_cap)));
        }
        if cfg.lambda_rpn > 0.0 || cfg.lambda_det > 0.0 {
            let (rpn_out, proposals) = self.propose(tape, &g)?;
            if cfg.lambda_rpn > 0.0 {
                let targets = rpn::assign_rpn_targets(&self.anchors, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou)?;
                let l = rpn::rpn_loss(tape, &rpn_out, &targets, cfg, rng)?;
                (out.rpn_cls, out.rpn_reg) = (l.cls, l.reg);
                terms.push(tape.scale(l.total, T::of(cfg.lambda_rpn)));
            }
            if cfg.lambda_det > 0.0 {
                let boxes: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
                let targets = detector::assign_det_targets(&boxes, gts, cfg, rng)?;
                let det_out = self.detect(tape, &g, &targets.rois)?;
                let l = detector::det_loss(tape, &det_out, &targets, cfg.det_beta)?;
                (out.det_cls, out.det_reg) = (l.cls, l.reg);
                terms.push(tape.scale(l.total, T::of(cfg.lambda_det)));
            }
        }
        out.total = match terms.split_first() {
            None => tape.constant(Tensor::scalar(T::zero())),
            Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))?,
        };
        Ok(out)
    }

    /// Detections, proposals and attention maps for one phrase, in model
    /// (`S×S`) pixel coordinates.
    pub fn infer(&self, tape: &mut Tape<T>, vis: &VisualFeatures, tokens: &TokenizedPhrase) -> Result<Prediction> {
        let g = self.ground(tape, vis, tokens)?;
        let (_, proposals) = self.propose(tape, &g)?;
        let alphas: Vec<Vec<f64>> =
            g.steps.iter().map(|s| tape.value(s.alpha).iter().map(|v| v.as_f64()).collect()).collect();
        let mut mean_alpha = vec![0.0; self.cfg.cells()];
        for a in &alphas {
            mean_alpha.iter_mut().zip(a).for_each(|(m, v)| *m += v / alphas.len() as f64);
        }
        let detections = if proposals.is_empty() {
            Vec::new()
        } else {
            let boxes: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
            let out = self.detect(tape, &g, &boxes)?;
            let rel = detector::relatedness(tape, &out)?;
            let deltas: Vec<f64> = tape.value(out.deltas).iter().map(|v| v.as_f64()).collect();
            let mut dets = detector::postprocess(
                &rel,
                &deltas,
                &boxes,
                self.cfg.image_size as f64,
                self.cfg.rel_threshold,
                self.cfg.det_nms,
            )?;
            dets.sort_by(|a, b| b.relatedness.total_cmp(&a.relatedness));
            dets
        };
        Ok(Prediction { detections, proposals, alphas, mean_alpha })
    }

    /// Runs every phrase against one image, sharing the visual features.
    /// Images of another size are letterboxed and results mapped back.
    pub fn predict_many(&self, image: &Image, phrases: &[TokenizedPhrase]) -> Result<Vec<Prediction>> {
        let s = self.cfg.image_size;
        let (input, scale) = if image.height() == s && image.width() == s {
            (None, 1.0)
        } else {
            let (img, scale) = backbone::letterbox(image, s)?;
            (Some(img), scale)
        };
        let mut tape = Tape::inference();
        let vis = self.visual(&mut tape, input.as_ref().unwrap_or(image))?;
        phrases
            .iter()
            .map(|tokens| {
                let mut p = self.infer(&mut tape, &vis, tokens)?;
                if scale != 1.0 {
                    let (w, h) = (image.width() as f64, image.height() as f64);
                    let back = |b: &Bbox| {
                        let r = [b.x1 / scale, b.y1 / scale, (b.x2 / scale).min(w), (b.y2 / scale).min(h)];
                        Bbox::new(r[0], r[1], r[2], r[3]).unwrap_or(*b)
                    };
                    p.detections.iter_mut().for_each(|d| d.bbox = back(&d.bbox));
                    p.proposals.iter_mut().for_each(|q| q.bbox = back(&q.bbox));
                }
                Ok(p)
            })
            .collect()
    }

    pub fn predict(&self, image: &Image, phrase: &str) -> Result<Prediction> {
        let tokens = self.tokenize(phrase)?;
        Ok(self.predict_many(image, std::slice::from_ref(&tokens))?.remove(0))
    }
}
