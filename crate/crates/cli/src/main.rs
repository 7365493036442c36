//! Command-line front end: dataset synthesis, training, evaluation,
//! prediction and attention inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use magnet::attention::{export_heatmap, heatmap_csv, write_heatmap};
use magnet::checkpoint;
use magnet::config::{Ablation, ModelConfig, Preset};
use magnet::data::{generate_dataset, read_dataset, read_ppm, Split, SynthConfig};
use magnet::model::{Model, Prediction};
use magnet::trainer::{evaluate, train, EvalReport};

#[derive(Parser, Debug)]
#[command(name = "magnet", version, about = "Phrase grounding with attention-assisted region proposals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: images/*.ppm and {train,val,test}.jsonl
    Synth(SynthArgs),
    /// Train on a dataset directory
    Train(TrainArgs),
    /// Score a checkpoint on one split
    Eval(EvalArgs),
    /// Ground a phrase in an image and print the detections as JSON
    Predict(PredictArgs),
    /// Write per-step attention maps for a phrase
    InspectAttention(InspectArgs),
}

/// Model configuration sources, applied in order: preset, file, flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk or paper
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// comma-separated variation letters: a, b, c
    #[arg(long)]
    ablation: Option<String>,
    /// extra overrides, e.g. --set epochs=2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || self.ablation.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::load(path)?,
            None => ModelConfig::desk(),
        };
        if let Some(p) = &self.preset {
            let preset = Preset::parse(p)?;
            if self.config.is_some() && preset != cfg.preset {
                bail!("--preset {p} conflicts with the preset in the config file");
            }
            if self.config.is_none() {
                cfg = ModelConfig::preset(preset);
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.ablation {
            cfg.ablation = Ablation::parse(a)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// dataset root to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = Split::Train.default_scenes())]
    train_scenes: usize,
    #[arg(long, default_value_t = Split::Val.default_scenes())]
    val_scenes: usize,
    #[arg(long, default_value_t = Split::Test.default_scenes())]
    test_scenes: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// dataset root
    #[arg(long)]
    data: PathBuf,
    /// run directory for logs and checkpoints
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// directory for metrics.csv and report.txt
    #[arg(long)]
    out: Option<PathBuf>,
    /// expected configuration; a checkpoint that does not match is rejected
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// binary PPM image
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    phrase: String,
    /// relatedness threshold; defaults to the checkpoint's
    #[arg(long)]
    threshold: Option<f64>,
    /// also write attention heatmaps into this directory
    #[arg(long)]
    attn: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    phrase: String,
    /// directory for the heatmaps
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.into_model()?.0)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { image_size: a.image_size, ..SynthConfig::default() };
    let s = generate_dataset(&a.out, [a.train_scenes, a.val_scenes, a.test_scenes], a.seed, &cfg)?;
    for (k, split) in Split::ALL.into_iter().enumerate() {
        println!(
            "{:<5} scenes {:>5}  samples {:>6}  multi-region {:>5}",
            split.name(),
            s.scenes[k],
            s.samples[k],
            s.multi_region[k]
        );
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let quiet = a.quiet;
    let report = train(cfg, &a.data, &a.out, &mut |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    println!("steps {} epochs {} best step {} ({:.0}s)", report.steps, report.epochs, report.best_step, report.seconds);
    if let Some(best) = report.best {
        print!("{}", best.to_text());
    }
    println!("checkpoint {}", report.outputs.best().display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let split = Split::parse(&a.split)?;
    let ckpt = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = if a.cfg.given() {
        let cfg = a.cfg.resolve()?;
        let vocab = magnet::textproc::Vocabulary::from_tokens(&ckpt.vocab)?;
        let mut model = Model::new(ModelConfig { embedding_file: None, ..cfg }, vocab)?;
        ckpt.load_into(&mut model)?;
        model
    } else {
        ckpt.into_model()?.0
    };
    let samples = read_dataset(&split.jsonl_path(&a.data))?;
    let report = evaluate(&model, &a.data, &samples)?;
    print!("{}", report.to_text());
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let csv = format!("split,{}\n{},{}\n", EvalReport::csv_header(), split.name(), report.csv_row());
        std::fs::write(out.join("metrics.csv"), csv)?;
        std::fs::write(out.join("report.txt"), report.to_text())?;
    }
    Ok(())
}

fn write_attention(dir: &Path, model: &Model<f32>, pred: &Prediction) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let grid = model.cfg.grid();
    for (t, alpha) in pred.alphas.iter().enumerate() {
        write_heatmap(&dir.join(format!("alpha_t{t:02}")), &export_heatmap(alpha, grid)?)?;
    }
    write_heatmap(&dir.join("alpha_mean"), &export_heatmap(&pred.mean_alpha, grid)?)?;
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let mut model = load_model(&a.checkpoint)?;
    if let Some(t) = a.threshold {
        model.cfg.rel_threshold = t;
    }
    let image = read_ppm(&a.image)?;
    let pred = model.predict(&image, &a.phrase)?;
    println!("{}", serde_json::to_string_pretty(&pred.detections)?);
    if let Some(dir) = a.attn {
        write_attention(&dir, &model, &pred)?;
    }
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let image = read_ppm(&a.image)?;
    let tokens = model.tokenize(&a.phrase)?;
    let pred = model.predict(&image, &a.phrase)?;
    write_attention(&a.out, &model, &pred)?;
    for (t, alpha) in pred.alphas.iter().enumerate() {
        let word = model.vocab.token(tokens.token_ids[t]).unwrap_or("?");
        println!("t={t} {word}");
        print!("{}", heatmap_csv(&export_heatmap(alpha, model.cfg.grid())?));
    }
    println!("heatmaps written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::InspectAttention(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
