//! Command-line orchestration.
//!
//! Every subcommand accepts `--config FILE`, a JSON object whose keys are the
//! subcommand's long flag names in snake case. Flags given on the command
//! line take precedence over the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use temporal_core::encoder::{fingerprint, load_checkpoint, save_checkpoint, EncoderParams};
use temporal_core::eval::{compare, evaluate, run_baselines, write_overlay, BenchConfig, EvalItem};
use temporal_core::pipeline::{segment_image_icl, segment_video, PipelineError, SelectionConfig};
use temporal_core::retrieval::{build_index, load_index, save_index, DatasetSource, FileSource};
use temporal_core::synthvideo::{
    generate_dataset, load_dataset, load_frames_dir, read_frame, read_mask, save_dataset,
    write_mask, DatasetSpec, SynthError,
};
use temporal_core::trainer::{train, write_history_csv, TrainConfig, TrainError};
use temporal_core::vos::ReferencePropagator;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Bad arguments or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let validation = cause.is::<ValidationError>()
            || matches!(
                cause.downcast_ref::<TrainError>(),
                Some(TrainError::Config(_))
            )
            || matches!(
                cause.downcast_ref::<PipelineError>(),
                Some(PipelineError::Config(_))
            )
            || matches!(
                cause.downcast_ref::<SynthError>(),
                Some(SynthError::InvalidSpec { .. })
            );
        if validation {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

#[derive(Debug, Parser)]
#[command(
    name = "temporal",
    version,
    about = "Time-contrastive prompt retrieval for in-context segmentation"
)]
pub struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    Gen(GenArgs),
    /// Pretrain the retriever encoder.
    Pretrain(PretrainArgs),
    /// Embed the training split into a retrieval index.
    Index(IndexArgs),
    /// Segment one image from retrieved context.
    SegmentImage(SegmentImageArgs),
    /// Segment a video from automatically selected keyframes.
    SegmentVideo(SegmentVideoArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Run the baseline comparison matrix on a dataset's test split.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sensor noise level in [0, 1].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Object speed in pixels per frame.
    #[arg(long)]
    pub speed: Option<f64>,
    /// Fraction of videos whose objects appear after the first frame.
    #[arg(long)]
    pub late_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub wd: Option<f32>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub positives: Option<usize>,
    #[arg(long)]
    pub batch_clips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate held-out retrieval every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Write an intermediate checkpoint next to `--out` every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Training history CSV; defaults to `history.csv` next to `--out`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentImageArgs {
    #[arg(long)]
    pub query: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub diverse: bool,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentVideoArgs {
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub candidates_k: Option<usize>,
    #[arg(long)]
    pub keyframes: Option<usize>,
    #[arg(long)]
    pub min_dist: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f32>,
    /// Context images per keyframe.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<u8>,
    #[arg(long)]
    pub foreground_only: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for random-context draws and the untrained encoder.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use every N-th test frame as an image query.
    #[arg(long)]
    pub query_stride: Option<usize>,
    #[arg(long)]
    pub foreground_only: bool,
}

/// Overlays the flags that were given onto the config file's values.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut base: Value = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    let Value::Object(base_map) = &mut base else {
        return Err(invalid(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    };
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !matches!(v, Value::Null | Value::Bool(false)) {
                base_map.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| invalid(format!("missing required option --{flag}")))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Gen(a) => gen(merge(&a, cfg)?),
        Command::Pretrain(a) => pretrain(merge(&a, cfg)?),
        Command::Index(a) => index(merge(&a, cfg)?),
        Command::SegmentImage(a) => segment_image(merge(&a, cfg)?),
        Command::SegmentVideo(a) => segment_video_cmd(merge(&a, cfg)?),
        Command::Eval(a) => eval(merge(&a, cfg)?),
        Command::Bench(a) => bench(merge(&a, cfg)?),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let out = require(a.out, "out")?;
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        num_videos: a.videos.unwrap_or(d.num_videos),
        frames_per_video: a.frames.unwrap_or(d.frames_per_video),
        image_size: a.size.unwrap_or(d.image_size),
        num_classes: a.classes.unwrap_or(d.num_classes),
        seed: a.seed.unwrap_or(d.seed),
        noise_level: a.noise.unwrap_or(d.noise_level),
        motion_speed: a.speed.unwrap_or(d.motion_speed),
        late_entry_fraction: a.late_fraction.unwrap_or(d.late_entry_fraction),
        ..d
    };
    spec.validate()?;
    let dataset = generate_dataset(&spec)?;
    let manifest = save_dataset(&dataset, &out)?;
    println!(
        "wrote {} videos ({} frames) to {}",
        dataset.videos.len(),
        dataset.frame_count(),
        manifest.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let data = require(a.data, "data")?;
    let out = require(a.out, "out")?;
    let mut config = TrainConfig::default();
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.learning_rate = a.lr.unwrap_or(config.learning_rate);
    config.weight_decay = a.wd.unwrap_or(config.weight_decay);
    config.loss.temperature = a.tau.unwrap_or(config.loss.temperature);
    config.clip.clip_len = a.clip_len.unwrap_or(config.clip.clip_len);
    config.clip.stride = a.stride.unwrap_or(config.clip.stride);
    config.clip.window = a.window.unwrap_or(config.clip.window);
    config.clip.positives = a.positives.unwrap_or(config.clip.positives);
    config.batch_clips = a.batch_clips.unwrap_or(config.batch_clips);
    config.seed = a.seed.unwrap_or(config.seed);
    config.eval_every = a.eval_every.unwrap_or(config.eval_every);
    config.checkpoint_every = a.checkpoint_every.unwrap_or(config.checkpoint_every);
    config.validate()?;
    let dataset = load_dataset(&data)?;
    let ckpt_dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let outcome = train(&dataset, &config, Some(ckpt_dir))?;
    save_checkpoint(&outcome.params, &out)?;
    let history = a.history.unwrap_or_else(|| ckpt_dir.join("history.csv"));
    write_history_csv(&outcome.history, &history)?;
    let first = outcome.history.first().expect("epoch 0 row");
    let last = outcome.history.last().expect("final row");
    println!(
        "loss {:.4} -> {:.4}; held-out top-1 {:?} -> {:?}; checkpoint {}",
        first.mean_loss,
        last.mean_loss,
        first.temporal_top1,
        last.temporal_top1,
        out.display()
    );
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let data = require(a.data, "data")?;
    let encoder = require(a.encoder, "encoder")?;
    let out = require(a.out, "out")?;
    let dataset = load_dataset(&data)?;
    let params = load_checkpoint(&encoder)?;
    let index = build_index(&dataset, &data, &params)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_index(&index, &out)?;
    println!("indexed {} frames into {}", index.len(), out.display());
    Ok(())
}

fn load_encoder_and_index(
    encoder: &Path,
    index: &Path,
) -> Result<(EncoderParams<f32>, temporal_core::retrieval::EmbeddingIndex)> {
    let params = load_checkpoint(encoder)?;
    let index = load_index(index, Some(&fingerprint(&params)))?;
    Ok((params, index))
}

fn segment_image(a: SegmentImageArgs) -> Result<()> {
    let query = require(a.query, "query")?;
    let out = require(a.out, "out")?;
    let mut selection = SelectionConfig::default();
    selection.context_k = a.k.unwrap_or(selection.context_k);
    selection.lambda = a.lambda.unwrap_or(selection.lambda);
    selection.validate()?;
    let (params, index) =
        load_encoder_and_index(&require(a.encoder, "encoder")?, &require(a.index, "index")?)?;
    let frame = read_frame(&query)?;
    let vos = ReferencePropagator::default();
    let result = segment_image_icl(
        &frame,
        &index,
        &FileSource,
        &params,
        &vos,
        &selection,
        a.diverse,
    )?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_mask(&out, &result.prediction.mask)?;
    if let Some(path) = a.overlay {
        write_overlay(&frame, &result.prediction.mask, &path)?;
    }
    let ids: Vec<String> = result.context.iter().map(|h| h.id.to_string()).collect();
    println!(
        "confidence {:.4}; context [{}]; mask {}",
        result.prediction.confidence,
        ids.join(", "),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct KeyframeReport {
    keyframes: Vec<usize>,
    scores: Vec<f32>,
    prompts: Vec<(usize, f32)>,
    fallback: bool,
}

fn segment_video_cmd(a: SegmentVideoArgs) -> Result<()> {
    let video = require(a.video, "video")?;
    let out = require(a.out, "out")?;
    let mut selection = SelectionConfig::default();
    selection.candidates_k = a.candidates_k.unwrap_or(selection.candidates_k);
    selection.keyframes_q = a.keyframes.unwrap_or(selection.keyframes_q);
    selection.min_dist = a.min_dist.unwrap_or(selection.min_dist);
    selection.gamma = a.gamma.unwrap_or(selection.gamma);
    selection.context_k = a.k.unwrap_or(selection.context_k);
    selection.validate()?;
    let (params, index) =
        load_encoder_and_index(&require(a.encoder, "encoder")?, &require(a.index, "index")?)?;
    let (frames, _) = load_frames_dir(&video)?;
    let vos = ReferencePropagator::default();
    let seg = segment_video(&frames, &index, &FileSource, &params, &vos, &selection)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (t, p) in seg.masks.iter().enumerate() {
        write_mask(&out.join(format!("mask_{t:04}.pgm")), &p.mask)?;
    }
    let report = KeyframeReport {
        keyframes: seg.keyframes.frames.clone(),
        scores: seg.keyframes.scores.clone(),
        prompts: seg.prompts.clone(),
        fallback: seg.fallback,
    };
    write(
        &out.join("keyframes.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    println!(
        "{} frames segmented from {} prompt(s){}; masks in {}",
        frames.len(),
        seg.prompts.len(),
        if seg.fallback { " (fallback)" } else { "" },
        out.display()
    );
    Ok(())
}

/// Relative paths of every `mask_*.pgm` under `root`, sorted.
fn mask_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let name = entry.file_name().to_string_lossy();
        if entry.file_type().is_file() && name.starts_with("mask_") && name.ends_with(".pgm") {
            out.push(entry.path().strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred_dir = require(a.pred, "pred")?;
    let truth_dir = require(a.truth, "truth")?;
    let classes = require(a.classes, "classes")?;
    let report_path = require(a.report, "report")?;
    if classes == 0 {
        return Err(invalid("--classes must be at least 1"));
    }
    let rel = mask_files(&truth_dir)?;
    if rel.is_empty() {
        return Err(invalid(format!(
            "no mask_*.pgm files under {}",
            truth_dir.display()
        )));
    }
    let mut truths = Vec::with_capacity(rel.len());
    let mut preds = Vec::with_capacity(rel.len());
    for r in &rel {
        truths.push(read_mask(&truth_dir.join(r))?);
        let p = pred_dir.join(r);
        preds.push(if p.exists() {
            Some(read_mask(&p)?)
        } else {
            None
        });
    }
    let items: Vec<EvalItem> = rel
        .iter()
        .zip(&truths)
        .zip(&preds)
        .map(|((r, t), p)| EvalItem {
            group: r
                .parent()
                .map(|g| g.display().to_string())
                .unwrap_or_default(),
            key: r.display().to_string(),
            pred: p.as_ref(),
            truth: t,
        })
        .collect();
    let report = evaluate(&items, classes, a.foreground_only)?;
    let mut csv = String::from("scope,name,dice\n");
    csv.push_str(&format!("macro,all,{:.6}\n", report.macro_dice));
    for (c, v) in &report.per_class {
        csv.push_str(&format!("class,{c},{v:.6}\n"));
    }
    for (g, v) in &report.per_video {
        csv.push_str(&format!("video,{g},{v:.6}\n"));
    }
    for m in &report.missing {
        csv.push_str(&format!("missing,{m},\n"));
    }
    write(&report_path, csv.as_bytes())?;
    print!(
        "{}",
        compare(&[("prediction".to_string(), report.clone())]).to_text()
    );
    if !report.missing.is_empty() {
        eprintln!(
            "{} masks had no prediction and were excluded",
            report.missing.len()
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let data = require(a.data, "data")?;
    let report_path = require(a.report, "report")?;
    let (params, index) =
        load_encoder_and_index(&require(a.encoder, "encoder")?, &require(a.index, "index")?)?;
    let dataset = load_dataset(&data)?;
    let config = BenchConfig {
        seed: a.seed.unwrap_or(0),
        query_stride: a.query_stride.unwrap_or(1),
        foreground_only: a.foreground_only,
        ..BenchConfig::default()
    };
    if config.query_stride == 0 {
        return Err(invalid("--query-stride must be at least 1"));
    }
    config.selection.validate()?;
    let untrained = EncoderParams::init_seeded(params.arch.clone(), config.seed)?;
    let vos = ReferencePropagator::default();
    let rows = run_baselines(
        &dataset,
        &params,
        &index,
        &untrained,
        &DatasetSource(&dataset),
        &vos,
        &config,
    )?;
    let table = compare(&rows);
    write(&report_path, table.to_csv().as_bytes())?;
    print!("{}", table.to_text());
    Ok(())
}
