//! Image segmentation by in-context learning and keyframe-driven video
//! segmentation on top of a retriever and a [`VosModel`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{embed, EncoderError, EncoderParams};
use crate::retrieval::{
    diverse_select, frame_scores, topk, EmbeddingIndex, FrameSource, Hit, RetrievalError,
};
use crate::synthvideo::{Frame, Mask};
use crate::vos::{
    prompt_labels, propagate_bidirectional, MaskPrediction, VosError, VosModel, VosPrompt,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("context set is empty")]
    EmptyContext,
    #[error("video has no frames")]
    EmptyVideo,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vos(#[from] VosError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    /// Least similar first, so the best exemplar sits next to the query.
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Context images per query.
    pub context_k: usize,
    /// Candidate pool for diverse context selection, as a multiple of `context_k`.
    pub diverse_pool_factor: usize,
    pub diverse: bool,
    pub lambda: f32,
    /// Highest-scoring frames considered as keyframes.
    pub candidates_k: usize,
    pub keyframes_q: usize,
    /// Selected keyframes are more than this many frames apart.
    pub min_dist: usize,
    /// Keyframe predictions below this confidence are dropped.
    pub gamma: f32,
    pub order: ContextOrder,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            context_k: 10,
            diverse_pool_factor: 3,
            diverse: false,
            lambda: 0.7,
            candidates_k: 40,
            keyframes_q: 20,
            min_dist: 3,
            gamma: 0.5,
            order: ContextOrder::Ascending,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.context_k == 0 {
            return bad("context_k must be at least 1");
        }
        if self.diverse_pool_factor == 0 {
            return bad("diverse_pool_factor must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.keyframes_q == 0 {
            return bad("keyframes_q must be at least 1");
        }
        if self.keyframes_q > self.candidates_k {
            return bad("keyframes_q must not exceed candidates_k");
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return bad("gamma must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEntry {
    pub id: u64,
    pub frame: Frame,
    pub mask: Mask,
    pub similarity: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextSet {
    pub entries: Vec<ContextEntry>,
}

impl ContextSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// Resolves retrieval hits to frames and masks.
    pub fn load(
        hits: &[Hit],
        index: &EmbeddingIndex,
        source: &dyn FrameSource,
    ) -> Result<Self, PipelineError> {
        let entries = hits
            .iter()
            .map(|h| {
                let e = index.get(h.id).ok_or(RetrievalError::UnknownId(h.id))?;
                Ok(ContextEntry {
                    id: h.id,
                    frame: source.frame(e)?,
                    mask: source.mask(e)?,
                    similarity: h.similarity,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Self { entries })
    }
}

/// Context frames followed by the unprompted query.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Frame>,
    pub prompts: Vec<Mask>,
    pub context_ids: Vec<u64>,
}

/// Orders the context by similarity (ties by id) and appends the query.
pub fn construct_synthetic_video(
    context: &ContextSet,
    query: &Frame,
    order: ContextOrder,
) -> Result<SyntheticVideo, PipelineError> {
    if context.entries.is_empty() {
        return Err(PipelineError::EmptyContext);
    }
    let mut sorted: Vec<&ContextEntry> = context.entries.iter().collect();
    sorted.sort_by(|a, b| {
        let by_sim = a.similarity.total_cmp(&b.similarity);
        let by_sim = if order == ContextOrder::Descending {
            by_sim.reverse()
        } else {
            by_sim
        };
        by_sim.then(a.id.cmp(&b.id))
    });
    let mut frames: Vec<Frame> = sorted.iter().map(|e| e.frame.clone()).collect();
    frames.push(query.clone());
    Ok(SyntheticVideo {
        frames,
        prompts: sorted.iter().map(|e| e.mask.clone()).collect(),
        context_ids: sorted.iter().map(|e| e.id).collect(),
    })
}

/// Context hits for an embedded query: plain top-K, or a diverse subset of a
/// larger top-K pool.
pub fn retrieve_context(
    index: &EmbeddingIndex,
    query: &[f32],
    config: &SelectionConfig,
    diversity: bool,
) -> Result<Vec<Hit>, PipelineError> {
    if !diversity {
        return Ok(topk(index, query, config.context_k)?);
    }
    let pool = topk(index, query, config.context_k * config.diverse_pool_factor)?;
    let candidates = pool
        .iter()
        .map(|h| index.candidate(h))
        .collect::<Result<Vec<_>, _>>()?;
    let chosen = diverse_select(&candidates, config.context_k, config.lambda);
    Ok(chosen
        .into_iter()
        .map(|id| {
            *pool
                .iter()
                .find(|h| h.id == id)
                .expect("selected from pool")
        })
        .collect())
}

/// Segments the final frame of a synthetic video. Each foreground label in
/// the prompts gets its own binary pass; passes are merged per pixel by the
/// highest foreground probability.
pub fn segment_synthetic(
    video: &SyntheticVideo,
    vos: &dyn VosModel,
) -> Result<MaskPrediction, PipelineError> {
    let query = video.frames.last().ok_or(PipelineError::EmptyContext)?;
    let (w, h) = query.dims();
    let frame_index = video.frames.len() - 1;
    let prompts: Vec<VosPrompt> = video
        .prompts
        .iter()
        .enumerate()
        .map(|(i, m)| VosPrompt {
            frame_index: i,
            mask: m.clone(),
        })
        .collect();
    let labels = prompt_labels(&prompts);
    let n = w * h;
    let mut best_fg = vec![0.0f32; n];
    let mut best_label = vec![0u8; n];
    let mut bg_conf = vec![1.0f32; n];
    let mut confidence = 0.0f32;
    for &label in &labels {
        let binary: Vec<VosPrompt> = prompts
            .iter()
            .map(|p| VosPrompt {
                frame_index: p.frame_index,
                mask: p.mask.binary(label),
            })
            .collect();
        let pred = vos
            .segment_sequence(&video.frames, &binary)?
            .pop()
            .ok_or(PipelineError::EmptyContext)?;
        confidence += pred.confidence;
        for i in 0..n {
            let pc = pred
                .pixel_confidence
                .as_ref()
                .map_or(pred.confidence, |p| p[i]);
            let fg = pred.mask.labels()[i] != 0;
            let p_fg = if fg { pc } else { 1.0 - pc };
            if fg && (best_label[i] == 0 || p_fg > best_fg[i]) {
                best_fg[i] = p_fg;
                best_label[i] = label;
            }
            bg_conf[i] = bg_conf[i].min(1.0 - p_fg);
        }
    }
    if labels.is_empty() {
        return Ok(MaskPrediction {
            frame_index,
            mask: Mask::new(w, h, vec![0; n]).expect("frame dimensions"),
            confidence: 1.0,
            pixel_confidence: Some(vec![1.0; n]),
        });
    }
    let pixel_confidence = (0..n)
        .map(|i| {
            if best_label[i] != 0 {
                best_fg[i]
            } else {
                bg_conf[i]
            }
        })
        .collect();
    Ok(MaskPrediction {
        frame_index,
        mask: Mask::new(w, h, best_label).expect("frame dimensions"),
        confidence: confidence / labels.len() as f32,
        pixel_confidence: Some(pixel_confidence),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclPrediction {
    pub prediction: MaskPrediction,
    pub context: Vec<Hit>,
}

/// Retrieve, build the synthetic video and segment the query.
#[allow(clippy::too_many_arguments)]
pub fn segment_image_icl(
    query: &Frame,
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    params: &EncoderParams<f32>,
    vos: &dyn VosModel,
    config: &SelectionConfig,
    diversity: bool,
) -> Result<IclPrediction, PipelineError> {
    config.validate()?;
    let z = embed(params, query)?;
    let hits = retrieve_context(index, &z, config, diversity)?;
    let context = ContextSet::load(&hits, index, source)?;
    let video = construct_synthetic_video(&context, query, config.order)?;
    Ok(IclPrediction {
        prediction: segment_synthetic(&video, vos)?,
        context: hits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSet {
    pub frames: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Greedy keyframe choice from per-frame scores: the `candidates_k` best
/// frames in descending score (ties to the earlier frame), skipping any
/// within `min_dist` of a frame already chosen, until `q` are chosen.
pub fn select_keyframes_from_scores(
    scores: &[f32],
    candidates_k: usize,
    q: usize,
    min_dist: usize,
) -> KeyframeSet {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(candidates_k);
    let mut frames: Vec<usize> = Vec::with_capacity(q);
    for t in order {
        if frames.len() == q {
            break;
        }
        if frames.iter().all(|&s| s.abs_diff(t) > min_dist) {
            frames.push(t);
        }
    }
    KeyframeSet {
        scores: frames.iter().map(|&t| scores[t]).collect(),
        frames,
    }
}

pub fn select_keyframes(
    frames: &[Frame],
    index: &EmbeddingIndex,
    params: &EncoderParams<f32>,
    config: &SelectionConfig,
) -> Result<KeyframeSet, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::EmptyVideo);
    }
    let scores = frame_scores(index, frames, params)?;
    Ok(select_keyframes_from_scores(
        &scores,
        config.candidates_k,
        config.keyframes_q,
        config.min_dist,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSegmentation {
    pub masks: Vec<MaskPrediction>,
    pub keyframes: KeyframeSet,
    /// Keyframes used as prompts with their confidences.
    pub prompts: Vec<(usize, f32)>,
    pub fallback: bool,
}

pub fn segment_video(
    frames: &[Frame],
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    params: &EncoderParams<f32>,
    vos: &dyn VosModel,
    config: &SelectionConfig,
) -> Result<VideoSegmentation, PipelineError> {
    config.validate()?;
    let keyframes = select_keyframes(frames, index, params, config)?;
    let mut predicted = Vec::with_capacity(keyframes.frames.len());
    for &t in &keyframes.frames {
        let icl = segment_image_icl(
            &frames[t],
            index,
            source,
            params,
            vos,
            config,
            config.diverse,
        )?;
        predicted.push((t, icl.prediction));
    }
    let mut prompts: Vec<(usize, MaskPrediction)> = predicted
        .iter()
        .filter(|(_, p)| p.confidence >= config.gamma)
        .cloned()
        .collect();
    let fallback = prompts.is_empty();
    if fallback {
        let best = predicted
            .iter()
            .max_by(|a, b| {
                a.1.confidence
                    .total_cmp(&b.1.confidence)
                    .then(b.0.cmp(&a.0))
            })
            .cloned()
            .ok_or(PipelineError::EmptyVideo)?;
        log::warn!(
            "no keyframe reached confidence {}; falling back to frame {} (confidence {})",
            config.gamma,
            best.0,
            best.1.confidence
        );
        prompts.push(best);
    }
    let vos_prompts: Vec<VosPrompt> = prompts
        .iter()
        .map(|(t, p)| VosPrompt {
            frame_index: *t,
            mask: p.mask.clone(),
        })
        .collect();
    let masks = propagate_bidirectional(vos, frames, &vos_prompts)?;
    Ok(VideoSegmentation {
        masks,
        keyframes,
        prompts: prompts.iter().map(|(t, p)| (*t, p.confidence)).collect(),
        fallback,
    })
}

/// A synthetic video with masks on every frame, the query last.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneVideo {
    pub query_id: u64,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub context_ids: Vec<u64>,
}

/// One video per index entry: its `k` nearest other entries in ascending
/// similarity, then the entry itself.
pub fn build_finetune_videos(
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    k: usize,
) -> Result<Vec<FinetuneVideo>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Config("k must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(index.len());
    for entry in &index.entries {
        let hits: Vec<Hit> = topk(index, &entry.embedding, k + 1)?
            .into_iter()
            .filter(|h| h.id != entry.id)
            .take(k)
            .collect();
        let query = source.frame(entry)?;
        let context = ContextSet::load(&hits, index, source)?;
        let video = construct_synthetic_video(&context, &query, ContextOrder::Ascending)?;
        let mut masks = video.prompts;
        masks.push(source.mask(entry)?);
        out.push(FinetuneVideo {
            query_id: entry.id,
            frames: video.frames,
            masks,
            context_ids: video.context_ids,
        });
    }
    Ok(out)
}
