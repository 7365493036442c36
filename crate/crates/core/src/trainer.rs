//! Joint training, evaluation and the CSV logs around them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::synth::derive_seed;
use crate::data::{read_dataset, read_ppm, Image, PhraseSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{Bbox, ScoredBox};
use crate::metrics::{map_report, MapReport, QueryResult};
use crate::model::{Model, Prediction};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Tape};
use crate::parallel;
use crate::rpn::hit_rate;
use crate::textproc::{build_vocab, TokenizedPhrase};

/// Proposals counted by the hit-rate metric.
pub const HIT_RATE_N: usize = 200;

/// Mean loss terms over one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub caption: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    /// before clipping
    pub grad_norm: f64,
}

impl StepStats {
    pub fn csv_header() -> &'static str {
        "step,epoch,loss,caption,rpn_cls,rpn_reg,det_cls,det_reg,grad_norm"
    }

    pub fn csv_row(&self, step: u64, epoch: usize) -> String {
        format!(
            "{step},{epoch},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.loss, self.caption, self.rpn_cls, self.rpn_reg, self.det_cls, self.det_reg, self.grad_norm
        )
    }
}

/// Phrases sharing one image within a step.
pub struct Unit<'a> {
    pub image: &'a Image,
    pub items: Vec<(&'a TokenizedPhrase, &'a [Bbox])>,
}

/// A model with its optimizer state.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>) -> Self {
        let adam = AdamState::new(&model.store);
        Trainer { model, adam, step: 0 }
    }

    fn adam_config(&self) -> AdamConfig {
        let c = &self.model.cfg;
        AdamConfig { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }

    /// One optimizer step on the mean loss over every item of every unit.
    /// Units run in parallel; their gradients are summed in unit order.
    pub fn step(&mut self, units: &[Unit<'_>]) -> Result<StepStats> {
        let n: usize = units.iter().map(|u| u.items.len()).sum();
        if n == 0 {
            return Err(Error::contract("training step without samples"));
        }
        let offsets: Vec<usize> = units
            .iter()
            .scan(0, |acc, u| {
                let at = *acc;
                *acc += u.items.len();
                Some(at)
            })
            .collect();
        let model = &self.model;
        let step = self.step;
        let weight = 1.0 / n as f32;
        let results = parallel::map_range(units.len(), |k| -> Result<(Gradients<f32>, StepStats)> {
            let unit = &units[k];
            let mut tape = Tape::new();
            let vis = model.visual(&mut tape, unit.image)?;
            let mut stats = StepStats::default();
            let mut total = None;
            for (i, (tokens, gts)) in unit.items.iter().enumerate() {
                let mut rng = SplitMix64::seed_from_u64(derive_seed(model.cfg.seed, step, (offsets[k] + i) as u64));
                let l = model.loss(&mut tape, &vis, tokens, gts, &mut rng)?;
                stats.loss += l.weighted(&model.cfg);
                stats.caption += l.caption;
                stats.rpn_cls += l.rpn_cls;
                stats.rpn_reg += l.rpn_reg;
                stats.det_cls += l.det_cls;
                stats.det_reg += l.det_reg;
                let scaled = tape.scale(l.total, weight);
                total = Some(match total {
                    None => scaled,
                    Some(t) => tape.add(t, scaled)?,
                });
            }
            let total = total.ok_or_else(|| Error::contract("empty training unit"))?;
            Ok((tape.backward(total)?, stats))
        });
        let mut grads = Gradients::empty(self.model.store.len());
        let mut stats = StepStats::default();
        for r in results {
            let (g, s) = r?;
            grads.add_assign(&g);
            stats.loss += s.loss;
            stats.caption += s.caption;
            stats.rpn_cls += s.rpn_cls;
            stats.rpn_reg += s.rpn_reg;
            stats.det_cls += s.det_cls;
            stats.det_reg += s.det_reg;
        }
        let inv = 1.0 / n as f64;
        for v in [
            &mut stats.loss,
            &mut stats.caption,
            &mut stats.rpn_cls,
            &mut stats.rpn_reg,
            &mut stats.det_cls,
            &mut stats.det_reg,
        ] {
            *v *= inv;
        }
        let norm = grads.global_norm() as f64;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", self.step + 1)));
        }
        stats.grad_norm = norm;
        let clip = self.model.cfg.grad_clip;
        if clip > 0.0 && norm > clip {
            grads.scale((clip / norm) as f32);
        }
        let cfg = self.adam_config();
        adam_step(&mut self.model.store, &grads, &mut self.adam, &cfg)?;
        self.step += 1;
        Ok(stats)
    }
}

/// Sample indices grouped by image, groups in order of first appearance.
pub fn group_by_image(samples: &[PhraseSample]) -> Vec<Vec<usize>> {
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let g = *index.entry(&s.image).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Scores of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub map: MapReport,
    /// percentage of queries whose gts are all covered by the top proposals
    pub hit_rate: f64,
    /// queries with exactly two gt boxes
    pub two_object: usize,
    /// of those, how many produced at least two detections
    pub two_object_multi: usize,
}

impl EvalReport {
    /// Percentage of two-object queries with at least two detections.
    pub fn multi_region_rate(&self) -> f64 {
        if self.two_object == 0 {
            0.0
        } else {
            100.0 * self.two_object_multi as f64 / self.two_object as f64
        }
    }

    pub fn csv_header() -> &'static str {
        "queries,r_at_1,r_at_5,r_at_10,map,hit_rate_200,two_object,two_object_multi"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{},{}", self.map.csv_row(), self.hit_rate, self.two_object, self.two_object_multi)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.map.to_text();
        let _ = writeln!(s, "{:<8} {:>8.2}", "hit@200", self.hit_rate);
        let _ = writeln!(s, "{:<8} {:>8.2}", "multi", self.multi_region_rate());
        s
    }
}

fn load_image(root: &Path, rel: &str) -> Result<Image> {
    read_ppm(&root.join(rel))
}

/// Predictions for every sample, in sample order. Images are processed in
/// parallel; each is read once.
pub fn predict_samples(model: &Model<f32>, root: &Path, samples: &[PhraseSample]) -> Result<Vec<Prediction>> {
    let groups = group_by_image(samples);
    let per_group = parallel::map(&groups, |g| -> Result<Vec<Prediction>> {
        let image = load_image(root, &samples[g[0]].image)?;
        let tokens = g.iter().map(|&i| model.tokenize(&samples[i].phrase)).collect::<Result<Vec<_>>>()?;
        model.predict_many(&image, &tokens)
    });
    let mut out: Vec<Option<Prediction>> = vec![None; samples.len()];
    for (g, preds) in groups.iter().zip(per_group) {
        for (&i, p) in g.iter().zip(preds?) {
            out[i] = Some(p);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every sample belongs to a group")).collect())
}

/// Recall@K, mAP, hit rate@200 and the multi-region count over `samples`.
pub fn evaluate(model: &Model<f32>, root: &Path, samples: &[PhraseSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation over an empty split"));
    }
    let preds = predict_samples(model, root, samples)?;
    let mut results = Vec::with_capacity(samples.len());
    let mut proposals: Vec<Vec<ScoredBox>> = Vec::with_capacity(samples.len());
    let (mut two, mut two_multi) = (0, 0);
    for (s, p) in samples.iter().zip(preds) {
        if s.gt_boxes.len() == 2 {
            two += 1;
            two_multi += usize::from(p.detections.len() >= 2);
        }
        proposals.push(p.proposals);
        results.push(QueryResult::new(p.detections, s.gt_boxes.clone())?);
    }
    let gts: Vec<Vec<Bbox>> = samples.iter().map(|s| s.gt_boxes.clone()).collect();
    Ok(EvalReport {
        map: map_report(&results)?,
        hit_rate: hit_rate(&proposals, &gts, HIT_RATE_N, 0.5)?,
        two_object: two,
        two_object_multi: two_multi,
    })
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn val_log(&self) -> PathBuf {
        self.dir.join("val_log.csv")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub epochs: usize,
    pub best_step: u64,
    pub best: Option<EvalReport>,
    pub last_stats: StepStats,
    pub seconds: f64,
    pub outputs: TrainOutputs,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains on `<root>/train.jsonl`, selects on `<root>/val.jsonl`, and writes
/// logs and checkpoints into `out`. `progress` receives one line per log event.
pub fn train(cfg: ModelConfig, root: &Path, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let train_set = read_dataset(&Split::Train.jsonl_path(root))?;
    let val_set = read_dataset(&Split::Val.jsonl_path(root))?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let val_set: Vec<PhraseSample> = match cfg.val_queries {
        0 => val_set,
        n => val_set.into_iter().take(n).collect(),
    };
    let phrases: Vec<&str> = train_set.iter().map(|s| s.phrase.as_str()).collect();
    let vocab = build_vocab(&phrases, 1)?;
    let model = Model::new(cfg.clone(), vocab)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    write(&outputs.config(), &cfg.to_text())?;

    let tokens = train_set.iter().map(|s| model.tokenize(&s.phrase)).collect::<Result<Vec<_>>>()?;
    let groups = group_by_image(&train_set);
    let mut trainer = Trainer::new(model);
    let mut train_log = format!("{}\n", StepStats::csv_header());
    let mut val_log = format!("step,{}\n", EvalReport::csv_header());
    let mut best: Option<(u64, EvalReport)> = None;
    let mut last_stats = StepStats::default();
    let mut since_eval = 0usize;
    let mut epochs_done = 0;

    let mut validate = |trainer: &Trainer, val_log: &mut String, progress: &mut dyn FnMut(&str)| -> Result<()> {
        if val_set.is_empty() {
            return Ok(());
        }
        let report = evaluate(&trainer.model, root, &val_set)?;
        let _ = writeln!(val_log, "{},{}", trainer.step, report.csv_row());
        progress(&format!(
            "val step {}: R@1 {:.2} mAP {:.4} hit@200 {:.2}",
            trainer.step, report.map.r_at_1, report.map.map, report.hit_rate
        ));
        if best.as_ref().is_none_or(|(_, b)| report.map.map > b.map.map) {
            best = Some((trainer.step, report));
            checkpoint::save(&outputs.best(), &trainer.model, Some(&trainer.adam), trainer.step)?;
        }
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut SplitMix64::seed_from_u64(derive_seed(cfg.seed, 0x5348_5546, epoch as u64)));
        let flat: Vec<usize> = order.iter().flat_map(|&g| groups[g].iter().copied()).collect();
        for chunk in flat.chunks(cfg.accumulate) {
            if cfg.max_steps > 0 && trainer.step >= cfg.max_steps as u64 {
                break 'epochs;
            }
            let mut runs: Vec<Vec<usize>> = Vec::new();
            for &i in chunk {
                match runs.last_mut() {
                    Some(r) if train_set[r[0]].image == train_set[i].image => r.push(i),
                    _ => runs.push(vec![i]),
                }
            }
            let images = runs.iter().map(|r| load_image(root, &train_set[r[0]].image)).collect::<Result<Vec<_>>>()?;
            let units: Vec<Unit<'_>> = runs
                .iter()
                .zip(&images)
                .map(|(r, image)| Unit {
                    image,
                    items: r.iter().map(|&i| (&tokens[i], train_set[i].gt_boxes.as_slice())).collect(),
                })
                .collect();
            last_stats = trainer.step(&units)?;
            let _ = writeln!(train_log, "{}", last_stats.csv_row(trainer.step, epoch));
            if trainer.step % 50 == 0 {
                progress(&format!(
                    "step {} epoch {epoch}: loss {:.4} (cap {:.3} rpn {:.3}+{:.3} det {:.3}+{:.3}) {:.0}s",
                    trainer.step,
                    last_stats.loss,
                    last_stats.caption,
                    last_stats.rpn_cls,
                    last_stats.rpn_reg,
                    last_stats.det_cls,
                    last_stats.det_reg,
                    started.elapsed().as_secs_f64()
                ));
            }
            since_eval += 1;
            if cfg.eval_every > 0 && since_eval >= cfg.eval_every {
                since_eval = 0;
                validate(&trainer, &mut val_log, progress)?;
            }
        }
        epochs_done = epoch + 1;
        if cfg.eval_every == 0 {
            since_eval = 0;
            validate(&trainer, &mut val_log, progress)?;
        }
    }
    if since_eval > 0 {
        validate(&trainer, &mut val_log, progress)?;
    }
    checkpoint::save(&outputs.last(), &trainer.model, Some(&trainer.adam), trainer.step)?;
    if best.is_none() {
        checkpoint::save(&outputs.best(), &trainer.model, Some(&trainer.adam), trainer.step)?;
    }
    write(&outputs.train_log(), &train_log)?;
    write(&outputs.val_log(), &val_log)?;
    let (best_step, best) = match best {
        Some((s, r)) => (s, Some(r)),
        None => (trainer.step, None),
    };
    Ok(TrainReport {
        steps: trainer.step,
        epochs: epochs_done,
        best_step,
        best,
        last_stats,
        seconds: started.elapsed().as_secs_f64(),
        outputs,
    })
}

/// Loads a checkpoint and scores one split of the dataset at `root`.
pub fn evaluate_checkpoint(ckpt: &Path, root: &Path, split: Split) -> Result<EvalReport> {
    let (model, _, _) = checkpoint::load(ckpt)?.into_model()?;
    let samples = read_dataset(&split.jsonl_path(root))?;
    evaluate(&model, root, &samples)
}
