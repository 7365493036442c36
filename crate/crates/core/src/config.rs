//! Model and training configuration with `desk` and `paper` presets, stored
//! as a flat `key = value` text file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// The three single-component variations used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// (a) ignore any embedding file; learn word vectors from scratch.
    pub no_embedding_file: bool,
    /// (b) attention scores and context without the global phrase embedding.
    pub no_global_h: bool,
    /// (c) feed the region proposal network the raw projected features.
    pub rpn_without_attention: bool,
}

impl Ablation {
    /// Parses a comma-separated list of variation letters, e.g. `"b"` or `"a,c"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "a" => a.no_embedding_file = true,
                "b" => a.no_global_h = true,
                "c" => a.rpn_without_attention = true,
                "none" => {}
                other => return Err(Error::config(format!("unknown ablation {other:?} (expected a, b or c)"))),
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_embedding_file {
            parts.push("a");
        }
        if self.no_global_h {
            parts.push("b");
        }
        if self.rpn_without_attention {
            parts.push("c");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

/// Every architecture, loss, and optimization knob.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// square input side S; multiple of 16
    pub image_size: usize,
    /// channels of the first three backbone blocks
    pub backbone_channels: [usize; 3],
    /// D_c, channels of the last backbone block
    pub feature_channels: usize,
    /// D_e
    pub visual_dim: usize,
    /// D_a; even, split across the two GRU directions
    pub attn_dim: usize,
    /// D_w
    pub word_dim: usize,
    /// append normalized x/y planes to the backbone input
    pub coord_channels: bool,
    /// T_max, sentinels included
    pub max_len: usize,
    pub embedding_file: Option<String>,
    pub embedding_std: f64,
    pub anchor_ratios: Vec<f64>,
    pub anchor_scales: Vec<f64>,
    pub rpn_hidden: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_nms: f64,
    pub rpn_beta: f64,
    /// N, proposals kept after NMS
    pub num_proposals: usize,
    /// P, ROI pooling resolution
    pub roi_bins: usize,
    pub det_hidden: usize,
    pub det_fg_iou: f64,
    pub det_batch: usize,
    pub det_pos_fraction: f64,
    pub det_nms: f64,
    pub det_beta: f64,
    /// θ_rel
    pub rel_threshold: f64,
    pub lambda_cap: f64,
    pub lambda_rpn: f64,
    pub lambda_det: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// samples whose gradients are summed before one optimizer step
    pub accumulate: usize,
    pub epochs: usize,
    /// hard cap on optimizer steps; 0 means no cap
    pub max_steps: usize,
    /// validation every this many optimizer steps; 0 means once per epoch
    pub eval_every: usize,
    /// validation queries used for model selection; 0 means all
    pub val_queries: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            image_size: 128,
            backbone_channels: [16, 32, 64],
            feature_channels: 64,
            visual_dim: 64,
            attn_dim: 64,
            word_dim: 32,
            coord_channels: true,
            max_len: 20,
            embedding_file: None,
            embedding_std: 0.1,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            anchor_scales: vec![16.0, 32.0, 64.0],
            rpn_hidden: 64,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_nms: 0.7,
            rpn_beta: 1.0 / 9.0,
            num_proposals: 200,
            roi_bins: 7,
            det_hidden: 128,
            det_fg_iou: 0.5,
            det_batch: 64,
            det_pos_fraction: 0.25,
            det_nms: 0.4,
            det_beta: 1.0,
            rel_threshold: 0.5,
            lambda_cap: 1.0,
            lambda_rpn: 1.0,
            lambda_det: 1.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            accumulate: 8,
            epochs: 6,
            max_steps: 0,
            eval_every: 0,
            val_queries: 0,
            seed: 7,
            ablation: Ablation::default(),
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            image_size: 512,
            backbone_channels: [16, 32, 64],
            feature_channels: 256,
            visual_dim: 512,
            attn_dim: 512,
            word_dim: 300,
            anchor_scales: vec![64.0, 128.0, 256.0],
            rpn_hidden: 512,
            det_hidden: 1024,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Feature grid side `S / 16`.
    pub fn grid(&self) -> usize {
        self.image_size / 16
    }

    /// D_f
    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_ratios.len() * self.anchor_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(&format!("image size {} is not a positive multiple of 16", self.image_size));
        }
        if self.attn_dim == 0 || self.attn_dim % 2 != 0 {
            return bad(&format!("attention dimension {} must be positive and even", self.attn_dim));
        }
        let dims = [
            self.feature_channels,
            self.visual_dim,
            self.word_dim,
            self.rpn_hidden,
            self.det_hidden,
            self.roi_bins,
            self.num_proposals,
            self.rpn_batch,
            self.det_batch,
            self.accumulate,
        ];
        if dims.contains(&0) || self.backbone_channels.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3");
        }
        if self.anchor_ratios.is_empty() || self.anchor_scales.is_empty() {
            return bad("anchor ratios and scales must be non-empty");
        }
        if self.anchor_ratios.iter().chain(&self.anchor_scales).any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor ratios and scales must be positive");
        }
        if [self.lambda_cap, self.lambda_rpn, self.lambda_det].iter().any(|&l| !(l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        for (name, v) in [
            ("rpn_nms", self.rpn_nms),
            ("det_nms", self.det_nms),
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("det_fg_iou", self.det_fg_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(&format!("{name} must lie in (0, 1]"));
            }
        }
        if !(self.rpn_neg_iou >= 0.0 && self.rpn_neg_iou <= self.rpn_pos_iou) {
            return bad("rpn_neg_iou must lie in [0, rpn_pos_iou]");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    /// Serializes as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("preset", self.preset.name().into()),
            ("image_size", self.image_size.to_string()),
            (
                "backbone_channels",
                self.backbone_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("feature_channels", self.feature_channels.to_string()),
            ("visual_dim", self.visual_dim.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("word_dim", self.word_dim.to_string()),
            ("coord_channels", self.coord_channels.to_string()),
            ("max_len", self.max_len.to_string()),
            ("embedding_file", self.embedding_file.clone().unwrap_or_default()),
            ("embedding_std", self.embedding_std.to_string()),
            ("anchor_ratios", list(&self.anchor_ratios)),
            ("anchor_scales", list(&self.anchor_scales)),
            ("rpn_hidden", self.rpn_hidden.to_string()),
            ("rpn_pos_iou", self.rpn_pos_iou.to_string()),
            ("rpn_neg_iou", self.rpn_neg_iou.to_string()),
            ("rpn_batch", self.rpn_batch.to_string()),
            ("rpn_pos_fraction", self.rpn_pos_fraction.to_string()),
            ("rpn_nms", self.rpn_nms.to_string()),
            ("rpn_beta", self.rpn_beta.to_string()),
            ("num_proposals", self.num_proposals.to_string()),
            ("roi_bins", self.roi_bins.to_string()),
            ("det_hidden", self.det_hidden.to_string()),
            ("det_fg_iou", self.det_fg_iou.to_string()),
            ("det_batch", self.det_batch.to_string()),
            ("det_pos_fraction", self.det_pos_fraction.to_string()),
            ("det_nms", self.det_nms.to_string()),
            ("det_beta", self.det_beta.to_string()),
            ("rel_threshold", self.rel_threshold.to_string()),
            ("lambda_cap", self.lambda_cap.to_string()),
            ("lambda_rpn", self.lambda_rpn.to_string()),
            ("lambda_det", self.lambda_det.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("accumulate", self.accumulate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("val_queries", self.val_queries.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.label()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<f64>> {
            value.split(',').map(|v| num(key, v.trim())).collect()
        }
        match key {
            "preset" => self.preset = Preset::parse(value)?,
            "image_size" => self.image_size = num(key, value)?,
            "backbone_channels" => {
                let v: Vec<usize> = value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?;
                self.backbone_channels = v
                    .try_into()
                    .map_err(|_| Error::config("backbone_channels needs three values"))?;
            }
            "feature_channels" => self.feature_channels = num(key, value)?,
            "visual_dim" => self.visual_dim = num(key, value)?,
            "attn_dim" => self.attn_dim = num(key, value)?,
            "word_dim" => self.word_dim = num(key, value)?,
            "coord_channels" => self.coord_channels = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "embedding_file" => {
                self.embedding_file = if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "embedding_std" => self.embedding_std = num(key, value)?,
            "anchor_ratios" => self.anchor_ratios = list(key, value)?,
            "anchor_scales" => self.anchor_scales = list(key, value)?,
            "rpn_hidden" => self.rpn_hidden = num(key, value)?,
            "rpn_pos_iou" => self.rpn_pos_iou = num(key, value)?,
            "rpn_neg_iou" => self.rpn_neg_iou = num(key, value)?,
            "rpn_batch" => self.rpn_batch = num(key, value)?,
            "rpn_pos_fraction" => self.rpn_pos_fraction = num(key, value)?,
            "rpn_nms" => self.rpn_nms = num(key, value)?,
            "rpn_beta" => self.rpn_beta = num(key, value)?,
            "num_proposals" => self.num_proposals = num(key, value)?,
            "roi_bins" => self.roi_bins = num(key, value)?,
            "det_hidden" => self.det_hidden = num(key, value)?,
            "det_fg_iou" => self.det_fg_iou = num(key, value)?,
            "det_batch" => self.det_batch = num(key, value)?,
            "det_pos_fraction" => self.det_pos_fraction = num(key, value)?,
            "det_nms" => self.det_nms = num(key, value)?,
            "det_beta" => self.det_beta = num(key, value)?,
            "rel_threshold" => self.rel_threshold = num(key, value)?,
            "lambda_cap" => self.lambda_cap = num(key, value)?,
            "lambda_rpn" => self.lambda_rpn = num(key, value)?,
            "lambda_det" => self.lambda_det = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "accumulate" => self.accumulate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "val_queries" => self.val_queries = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => self.ablation = Ablation::parse(value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the preset named by a `preset`
    /// line (desk when absent). `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| Preset::parse(v))
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = ModelConfig::preset(preset);
        for (line, k, v) in pairs {
            cfg.set(&k, &v).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper()] {
            cfg.validate().unwrap();
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        assert_eq!(ModelConfig::desk().grid(), 8);
        assert_eq!(ModelConfig::paper().grid(), 32);
        assert_eq!(ModelConfig::paper().anchors_per_cell(), 9);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = ModelConfig::from_text("preset = desk\nseed = 99 # comment\nablation = b,c\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert!(cfg.ablation.no_global_h && cfg.ablation.rpn_without_attention);
        assert!(!cfg.ablation.no_embedding_file);
        assert!(matches!(ModelConfig::from_text("nonsense"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ModelConfig::from_text("seed = x"), Err(Error::Parse { .. })));
        assert!(ModelConfig::from_text("image_size = 100").is_err());
        assert!(ModelConfig::from_text("attn_dim = 63").is_err());
        assert!(ModelConfig::from_text("lambda_det = -1").is_err());
        assert!(Ablation::parse("d").is_err());
    }
}
