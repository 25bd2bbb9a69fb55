use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segvid_core::data::{ground_truth, synth_generate, Dataset, Manifest, SampleMode, Split, SynthConfig};
use segvid_core::ensemble::{fuse_tables, tune_weights, BoOptions, TuneOptions};
use segvid_core::infer::{infer, InferConfig};
use segvid_core::metrics::DEFAULT_K;
use segvid_core::model::{Family, Model, ModelSpec};
use segvid_core::train::{finetune, pretrain, SegmentSet, TrainConfig};
use segvid_core::transformer::Pooling;
use segvid_core::PredictionTable;

/// Video segment classification: data generation, training, inference,
/// evaluation and ensembling.
#[derive(Parser)]
#[command(name = "segvid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark (features, segment labels, manifest).
    GenData(GenData),
    /// Train a model on video-level labels of the pretrain split.
    Pretrain(Pretrain),
    /// Fine-tune on segment ratings, keeping the best holdout checkpoint.
    Finetune(Finetune),
    /// Score rated segments of a split and write a prediction table.
    Infer(Infer),
    /// MAP@K of a prediction table against a split's ratings.
    Eval(Eval),
    /// Weighted rank fusion of prediction tables.
    Fuse(Fuse),
    /// Bayesian optimization of fusion weights on a split.
    TuneWeights(TuneWeights),
}

#[derive(Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    videos: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps (default 2000 for pretraining, 500 for fine-tuning).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    #[arg(long, default_value_t = 10_000)]
    decay_interval: usize,
}

impl TrainArgs {
    fn config(&self, default_steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.lr,
            decay: self.decay,
            decay_interval: self.decay_interval,
            steps: self.steps.unwrap_or(default_steps),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct Pretrain {
    #[command(flatten)]
    train: TrainArgs,
    /// netvlad, nextvlad_mix, bert or bert_cross.
    #[arg(long, default_value = "netvlad")]
    family: String,
    /// first, mean or attention (transformer families).
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long, default_value_t = 30)]
    sample_frames: usize,
    /// subsequence or with_replacement.
    #[arg(long, default_value = "subsequence")]
    sample_mode: String,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Finetune {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretrained checkpoint; a fresh model of `--family` is used without it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "netvlad")]
    family: String,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output prediction table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    tta_min: i64,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    tta_max: i64,
    /// Frames per shift step.
    #[arg(long, default_value_t = 1)]
    unit: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    topk: usize,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct Fuse {
    /// Prediction tables, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    predictions: Vec<PathBuf>,
    /// One weight per table; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneWeights {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    predictions: Vec<PathBuf>,
    /// Split whose ratings score the candidate weights.
    #[arg(long, default_value = "holdout")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    init_samples: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Also write the fused table.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad flag values detected after parsing; reported with the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: segvid_core::Result<T>) -> Result<T> {
    r.map_err(|e| Usage(e.to_string()).into())
}

fn parse_flag<T: std::str::FromStr<Err = segvid_core::Error>>(s: &str) -> Result<T> {
    usage(s.parse())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
    Ok(Dataset::load(manifest)?)
}

fn fresh_spec(family: &str, pooling: Option<&str>, data: &Dataset) -> Result<ModelSpec> {
    let m = &data.manifest;
    let mut spec = ModelSpec::default_for(parse_flag::<Family>(family)?, m.visual_dim, m.audio_dim, m.classes);
    if let Some(p) = pooling {
        if !matches!(spec, ModelSpec::Bert(_) | ModelSpec::BertCross(_)) {
            bail!(Usage(format!("--pooling does not apply to the {family} family")));
        }
        spec = spec.with_pooling(parse_flag::<Pooling>(p)?);
    }
    Ok(spec)
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if model.spec.input_dim() != m.feature_dim() || model.spec.classes() != m.classes {
        bail!(Usage(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.spec.input_dim(),
            model.spec.classes(),
            m.feature_dim(),
            m.classes
        )));
    }
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = SynthConfig { classes: a.classes, videos: a.videos, frames: a.frames, seed: a.seed, ..SynthConfig::default() };
    usage(cfg.validate())?;
    let data = synth_generate(&cfg)?;
    let manifest = data.write(&a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_pretrain(a: Pretrain) -> Result<()> {
    let data = load_dataset(&a.train.manifest)?;
    let model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => Model::new(fresh_spec(&a.family, a.pooling.as_deref(), &data)?, a.train.seed)?,
    };
    check_compatible(&model, &data)?;
    let cfg = TrainConfig {
        sample_frames: a.sample_frames,
        sample_mode: parse_flag::<SampleMode>(&a.sample_mode)?,
        ..a.train.config(2_000)
    };
    usage(cfg.validate())?;
    let (model, log) = pretrain(model, &cfg, data.videos(Split::Pretrain))?;
    if let Some(last) = log.last() {
        println!("step {} examples {} lr {:.3e} loss {:.6}", last.step, last.examples, last.lr, last.loss);
    }
    model.save(&a.train.out)?;
    println!("wrote {}", a.train.out.display());
    Ok(())
}

fn run_finetune(a: Finetune) -> Result<()> {
    let data = load_dataset(&a.train.manifest)?;
    let model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => Model::new(fresh_spec(&a.family, a.pooling.as_deref(), &data)?, a.train.seed)?,
    };
    check_compatible(&model, &data)?;
    let cfg = TrainConfig { eval_every: a.eval_every, k: a.k, ..a.train.config(500) };
    usage(cfg.validate())?;
    let set = |s| SegmentSet { videos: data.videos(s), labels: data.segments(s) };
    let res = finetune(model, &cfg, set(Split::Finetune), set(Split::Holdout))?;
    for (step, map) in &res.evaluations {
        println!("eval step {step} holdout MAP@{} {map:.6}", a.k);
    }
    println!("best step {} holdout MAP@{} {:.6}", res.best_step, a.k, res.best_map);
    res.model.save(&a.train.out)?;
    println!("wrote {}", a.train.out.display());
    Ok(())
}

fn run_infer(a: Infer) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let model = Model::load(&a.checkpoint)?;
    check_compatible(&model, &data)?;
    let split = parse_flag::<Split>(&a.split)?;
    let cfg = InferConfig { tta_min: a.tta_min, tta_max: a.tta_max, unit: a.unit, topk: a.topk };
    usage(cfg.validate())?;
    let table = infer(&model, data.videos(split), data.segments(split), &cfg)?;
    table.save(&a.out)?;
    println!("wrote {} ({} rows)", a.out.display(), table.len());
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let split = parse_flag::<Split>(&a.split)?;
    let table = PredictionTable::load(&a.predictions)?;
    let map = table.map_at_k(&ground_truth(data.segments(split)), a.k)?;
    println!("MAP@{} {map:.6}", a.k);
    Ok(())
}

fn load_tables(paths: &[PathBuf]) -> Result<Vec<PredictionTable>> {
    paths
        .iter()
        .map(|p| PredictionTable::load(p).with_context(|| format!("reading predictions {}", p.display())))
        .collect()
}

fn run_fuse(a: Fuse) -> Result<()> {
    let tables = load_tables(&a.predictions)?;
    let weights = if a.weights.is_empty() { vec![1.0; tables.len()] } else { a.weights };
    let mut fused = usage(fuse_tables(&tables, &weights))?;
    fused.truncate(a.topk);
    fused.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_tune(a: TuneWeights) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let split = parse_flag::<Split>(&a.split)?;
    let tables = load_tables(&a.predictions)?;
    let truth = ground_truth(data.segments(split));
    let opts = TuneOptions {
        k: a.k,
        init_samples: a.init_samples,
        seed: a.seed,
        bo: BoOptions { iterations: a.iters, ..BoOptions::default() },
    };
    if tables.len() > 1 && opts.init_samples < 2 {
        bail!(Usage(format!("--init-samples must be at least 2, got {}", opts.init_samples)));
    }
    let res = tune_weights(&tables, &truth, &opts)?;
    for (p, m) in a.predictions.iter().zip(&res.single_maps) {
        println!("single {} MAP@{} {m:.6}", p.display(), a.k);
    }
    let w: Vec<String> = res.weights.iter().map(|w| format!("{w:.6}")).collect();
    println!("weights {}", w.join(","));
    println!("fused MAP@{} {:.6}", a.k, res.map);
    if let Some(out) = a.out {
        fuse_tables(&tables, &res.weights)?.save(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Fuse(a) => run_fuse(a),
        Command::TuneWeights(a) => run_tune(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
