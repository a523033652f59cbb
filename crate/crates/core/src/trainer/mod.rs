//! Time-contrastive pretraining loop.

mod augment;
mod optimizer;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    self, backward, embed, forward, normalize, Architecture, EncoderError, EncoderParams,
};
use crate::loss::{multipositive_loss, LossConfig, LossError};
use crate::sampler::{build_minibatch, sample_clip, ClipSpec, SamplerError};
use crate::synthvideo::{Dataset, Video};

pub use augment::{
    flip_horizontal, gaussian_blur, gaussian_kernel, AugmentationParams, ViewTransform,
};
pub use optimizer::AdamW;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss {loss} at epoch {epoch} step {step} (parameter norm {param_norm}, last finite loss {last_finite:?})")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f32,
        param_norm: f64,
        last_finite: Option<f32>,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip: ClipSpec,
    pub batch_clips: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub augmentation: AugmentationParams,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Compute the retrieval metric every this many epochs (and at the last).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: ClipSpec::default(),
            batch_clips: 4,
            loss: LossConfig::default(),
            seed: 0,
            augmentation: AugmentationParams::default(),
            channels: vec![8, 16, 32],
            embedding_dim: 64,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("moment parameters must satisfy 0 <= beta < 1 and eps > 0");
        }
        if self.batch_clips < 1 {
            return bad("batch_clips must be at least 1");
        }
        if !(self.loss.temperature > 0.0 && self.loss.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1");
        }
        self.clip.validate()?;
        self.augmentation.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn architecture(&self, input_h: usize, input_w: usize) -> Architecture {
        Architecture::with_channels(input_h, input_w, &self.channels, self.embedding_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub temporal_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    pub initial: EncoderParams<f32>,
    /// Row 0 evaluates the initial parameters without updating them.
    pub history: Vec<EpochRecord>,
}

/// Initial encoder for a dataset and config, identical to the one `train`
/// starts from.
pub fn initial_params(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<EncoderParams<f32>, TrainError> {
    let size = dataset.spec.image_size;
    Ok(EncoderParams::init_seeded(
        config.architecture(size, size),
        config.seed,
    )?)
}

/// Fraction of anchors whose nearest other frame (cosine, ties to the lower
/// position) is from the same video within `window` frames.
pub fn temporal_top1(
    params: &EncoderParams<f32>,
    videos: &[&Video],
    window: usize,
) -> Result<f64, EncoderError> {
    let mut z = Vec::new();
    let mut origin = Vec::new();
    for v in videos {
        for (t, f) in v.frames.iter().enumerate() {
            z.push(embed(params, f)?);
            origin.push((v.id, t));
        }
    }
    if z.len() < 2 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for a in 0..z.len() {
        let mut best = (f32::NEG_INFINITY, usize::MAX);
        for b in (0..z.len()).filter(|&b| b != a) {
            let s: f32 = z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum();
            if s > best.0 {
                best = (s, b);
            }
        }
        let (va, ta) = origin[a];
        let (vb, tb) = origin[best.1];
        if va == vb && ta.abs_diff(tb) <= window {
            hits += 1;
        }
    }
    Ok(hits as f64 / z.len() as f64)
}

pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let videos = dataset.train_videos();
    let held_out = dataset.test_videos();
    if videos.len() < config.batch_clips {
        return Err(TrainError::DatasetTooSmall(format!(
            "{} training videos for {} clips per minibatch",
            videos.len(),
            config.batch_clips
        )));
    }
    let span = config.clip.span();
    if let Some(v) = videos.iter().find(|v| v.len() < span) {
        return Err(TrainError::DatasetTooSmall(format!(
            "video {} has {} frames, clips span {span}",
            v.id,
            v.len()
        )));
    }
    let initial = initial_params(dataset, config)?;
    let mut params = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synthvideo::mix_seed(config.seed, 1));
    let mut opt = AdamW::new(
        params.values.len(),
        config.learning_rate,
        config.weight_decay,
        config.beta1,
        config.beta2,
        config.eps,
    );
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut last_finite = None;
    for epoch in 0..=config.epochs {
        let update = epoch > 0;
        let mut order: Vec<&Video> = videos.clone();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (step, group) in order.chunks_exact(config.batch_clips).enumerate() {
            let mut clips = Vec::with_capacity(group.len());
            for v in group {
                let clip = sample_clip(v.id, v.len(), &config.clip, &mut rng)?;
                let frames = clip
                    .frame_indices
                    .iter()
                    .map(|&t| v.frames[t].clone())
                    .collect();
                clips.push((clip, frames));
            }
            let batch = build_minibatch(&clips, &config.clip, &config.augmentation, &mut rng)?;
            let frames: Vec<_> = batch.frames().cloned().collect();
            let (raw, tape) = forward(&params, &frames)?;
            let z: Vec<Vec<f32>> = raw.iter().map(|r| normalize(r)).collect();
            let out = multipositive_loss(&z, &batch.labels, &config.loss)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    loss: out.loss,
                    param_norm: params
                        .values
                        .iter()
                        .map(|&v| f64::from(v).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                    last_finite,
                });
            }
            last_finite = Some(out.loss);
            losses.push(f64::from(out.loss));
            if update {
                let grad = backward(&params, &tape, &out.grad, true)?;
                opt.step(&mut params.values, &grad);
            }
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let evaluate = epoch == 0 || epoch == config.epochs || epoch % config.eval_every == 0;
        let temporal = if evaluate && !held_out.is_empty() {
            Some(temporal_top1(&params, &held_out, config.clip.window)?)
        } else {
            None
        };
        log::info!("epoch {epoch}: loss {mean_loss:.4} top1 {temporal:?}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            temporal_top1: temporal,
        });
        if let Some(dir) = checkpoint_dir {
            if update && config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{epoch:04}.tenc"));
                encoder::save_checkpoint(&params, &path)?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        initial,
        history,
    })
}

/// `epoch,mean_loss,temporal_top1`; epochs without an evaluation leave the
/// last column empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,temporal_top1\n");
    for r in history {
        let top1 = r.temporal_top1.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", r.epoch, r.mean_loss, top1).unwrap();
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, history_csv(history)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvideo::{generate_dataset, DatasetSpec};

    fn small() -> Dataset {
        generate_dataset(&DatasetSpec {
            num_videos: 6,
            frames_per_video: 20,
            image_size: 32,
            num_classes: 2,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            clip: ClipSpec {
                clip_len: 6,
                ..Default::default()
            },
            batch_clips: 2,
            channels: vec![4, 8],
            embedding_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let d = small();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(2)
        };
        let out = train(&d, &cfg, None).unwrap();
        assert_eq!(out.params, out.initial);
    }

    #[test]
    fn deterministic_history() {
        let d = small();
        let a = train(&d, &quick(2), None).unwrap();
        let b = train(&d, &quick(2), None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 3);
        assert!(history_csv(&a.history).starts_with("epoch,mean_loss,temporal_top1\n0,"));
    }

    #[test]
    fn too_few_videos() {
        let d = small();
        let cfg = TrainConfig {
            batch_clips: 10,
            ..quick(1)
        };
        assert!(matches!(
            train(&d, &cfg, None),
            Err(TrainError::DatasetTooSmall(_))
        ));
        let cfg = TrainConfig {
            clip: ClipSpec {
                clip_len: 16,
                ..Default::default()
            },
            ..quick(1)
        };
        assert!(matches!(
            train(&d, &cfg, None),
            Err(TrainError::DatasetTooSmall(_))
        ));
    }

    #[test]
    fn checkpoints_written_at_interval() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..quick(4)
        };
        let out = train(&d, &cfg, Some(dir.path())).unwrap();
        let last = encoder::load_checkpoint(&dir.path().join("checkpoint_0004.tenc")).unwrap();
        assert_eq!(last, out.params);
        assert!(dir.path().join("checkpoint_0002.tenc").exists());
        assert!(!dir.path().join("checkpoint_0003.tenc").exists());
    }

    #[test]
    fn invalid_config_rejected() {
        let d = small();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick(1)
        };
        assert!(matches!(train(&d, &cfg, None), Err(TrainError::Config(_))));
    }
}
