//! The comparison matrix: retrieval-driven ICL against random and untrained
//! retrievers, and keyframe video segmentation against first-frame prompting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, DiceReport, EvalError, EvalItem};
use crate::encoder::{embed, fingerprint, EncoderParams};
use crate::pipeline::{
    construct_synthetic_video, retrieve_context, segment_synthetic, segment_video, ContextSet,
    SelectionConfig,
};
use crate::retrieval::{cosine, EmbeddingIndex, FrameSource, Hit};
use crate::synthvideo::{mix_seed, Dataset, Frame, Mask, Video};
use crate::vos::{propagate_bidirectional, VosModel, VosPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub selection: SelectionConfig,
    pub context_sizes: Vec<usize>,
    pub random_draws: usize,
    /// Every n-th test frame is used as an image query.
    pub query_stride: usize,
    pub foreground_only: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            context_sizes: vec![5, 10],
            random_draws: 5,
            query_stride: 1,
            foreground_only: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageQuery<'a> {
    pub group: String,
    pub key: String,
    pub frame: &'a Frame,
    pub truth: &'a Mask,
}

/// Every `stride`-th annotated frame of `videos`.
pub fn image_queries<'a>(videos: &[&'a Video], stride: usize) -> Vec<ImageQuery<'a>> {
    let mut out = Vec::new();
    for v in videos {
        for t in (0..v.len()).step_by(stride.max(1)) {
            if let Some(m) = v.mask(t) {
                out.push(ImageQuery {
                    group: format!("video_{:04}", v.id),
                    key: format!("video_{:04}/{t:04}", v.id),
                    frame: &v.frames[t],
                    truth: m,
                });
            }
        }
    }
    out
}

fn score(
    queries: &[ImageQuery],
    preds: &[Mask],
    classes: u8,
    fg: bool,
) -> Result<DiceReport, EvalError> {
    let items: Vec<EvalItem> = queries
        .iter()
        .zip(preds)
        .map(|(q, p)| EvalItem {
            group: q.group.clone(),
            key: q.key.clone(),
            pred: Some(p),
            truth: q.truth,
        })
        .collect();
    evaluate(&items, classes, fg)
}

fn icl_with_hits(
    query: &Frame,
    hits: &[Hit],
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    config: &SelectionConfig,
) -> Result<Mask, EvalError> {
    let context = ContextSet::load(hits, index, source)?;
    let video = construct_synthetic_video(&context, query, config.order)?;
    Ok(segment_synthetic(&video, vos)?.mask)
}

fn retrieval_run(
    queries: &[ImageQuery],
    params: &EncoderParams<f32>,
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    config: &SelectionConfig,
    diversity: bool,
) -> Result<Vec<Mask>, EvalError> {
    queries
        .iter()
        .map(|q| {
            let z = embed(params, q.frame)?;
            let hits = retrieve_context(index, &z, config, diversity)?;
            icl_with_hits(q.frame, &hits, index, source, vos, config)
        })
        .collect()
}

fn random_run(
    queries: &[ImageQuery],
    params: &EncoderParams<f32>,
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Vec<Mask>, EvalError> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let z = embed(params, q.frame)?;
            let k = config.context_k.min(index.len());
            let hits: Vec<Hit> = rand::seq::index::sample(&mut rng, index.len(), k)
                .into_iter()
                .map(|j| {
                    let e = &index.entries[j];
                    Hit {
                        id: e.id,
                        similarity: cosine(&z, &e.embedding),
                    }
                })
                .collect();
            icl_with_hits(q.frame, &hits, index, source, vos, config)
        })
        .collect()
}

/// Re-embeds every index entry with other parameters.
fn reindex(
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    params: &EncoderParams<f32>,
) -> Result<EmbeddingIndex, EvalError> {
    let mut out = EmbeddingIndex::new(params.arch.dim, fingerprint(params));
    for e in &index.entries {
        let mut e = e.clone();
        e.embedding = embed(params, &source.frame(&e)?)?;
        out.entries.push(e);
    }
    Ok(out)
}

/// Image rows: trained retrieval with and without diversity at each context
/// size, random context averaged over draws, and an untrained retriever at
/// the largest context size.
#[allow(clippy::too_many_arguments)]
pub fn run_image_baselines(
    queries: &[ImageQuery],
    trained: &EncoderParams<f32>,
    index: &EmbeddingIndex,
    untrained: &EncoderParams<f32>,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    classes: u8,
    config: &BenchConfig,
) -> Result<Vec<(String, DiceReport)>, EvalError> {
    let fg = config.foreground_only;
    let mut rows = Vec::new();
    let at = |k: usize| SelectionConfig {
        context_k: k,
        ..config.selection.clone()
    };
    for &k in &config.context_sizes {
        for diversity in [false, true] {
            let preds = retrieval_run(queries, trained, index, source, vos, &at(k), diversity)?;
            let name = if diversity {
                format!("temporal diverse k={k}")
            } else {
                format!("temporal k={k}")
            };
            rows.push((name, score(queries, &preds, classes, fg)?));
        }
    }
    for &k in &config.context_sizes {
        let reports = (0..config.random_draws)
            .map(|d| {
                let seed = mix_seed(config.seed, (k as u64) << 32 | d as u64);
                let preds = random_run(queries, trained, index, source, vos, &at(k), seed)?;
                score(queries, &preds, classes, fg)
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        rows.push((
            format!("random k={k} ({} draws)", config.random_draws),
            DiceReport::mean(&reports),
        ));
    }
    if let Some(&k) = config.context_sizes.iter().max() {
        let plain = reindex(index, source, untrained)?;
        let preds = retrieval_run(queries, untrained, &plain, source, vos, &at(k), false)?;
        rows.push((
            format!("untrained k={k}"),
            score(queries, &preds, classes, fg)?,
        ));
    }
    Ok(rows)
}

/// Video rows: the keyframe pipeline and propagation from the ground-truth
/// first-frame mask.
pub fn run_video_baselines(
    videos: &[&Video],
    trained: &EncoderParams<f32>,
    index: &EmbeddingIndex,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    classes: u8,
    config: &BenchConfig,
) -> Result<Vec<(String, DiceReport)>, EvalError> {
    let mut pipeline_preds: Vec<Vec<Mask>> = Vec::new();
    let mut first_preds: Vec<Vec<Mask>> = Vec::new();
    let annotated: Vec<&Video> = videos
        .iter()
        .copied()
        .filter(|v| v.is_annotated())
        .collect();
    for v in &annotated {
        let seg = segment_video(&v.frames, index, source, trained, vos, &config.selection)?;
        pipeline_preds.push(seg.masks.into_iter().map(|p| p.mask).collect());
        let prompt = VosPrompt {
            frame_index: 0,
            mask: v.mask(0).expect("annotated").clone(),
        };
        let first = propagate_bidirectional(vos, &v.frames, &[prompt])?;
        first_preds.push(first.into_iter().map(|p| p.mask).collect());
    }
    let report = |preds: &[Vec<Mask>]| {
        let items: Vec<EvalItem> = annotated
            .iter()
            .zip(preds)
            .flat_map(|(v, ps)| {
                ps.iter().enumerate().map(move |(t, p)| EvalItem {
                    group: format!("video_{:04}", v.id),
                    key: format!("video_{:04}/{t:04}", v.id),
                    pred: Some(p),
                    truth: v.mask(t).expect("annotated"),
                })
            })
            .collect();
        evaluate(&items, classes, config.foreground_only)
    };
    Ok(vec![
        (
            "video temporal pipeline".to_string(),
            report(&pipeline_preds)?,
        ),
        ("video first-frame gt".to_string(), report(&first_preds)?),
    ])
}

/// The full matrix on the test split of `dataset`.
#[allow(clippy::too_many_arguments)]
pub fn run_baselines(
    dataset: &Dataset,
    trained: &EncoderParams<f32>,
    index: &EmbeddingIndex,
    untrained: &EncoderParams<f32>,
    source: &dyn FrameSource,
    vos: &dyn VosModel,
    config: &BenchConfig,
) -> Result<Vec<(String, DiceReport)>, EvalError> {
    let test = dataset.test_videos();
    let classes = dataset.spec.num_classes;
    let queries = image_queries(&test, config.query_stride);
    let mut rows = run_image_baselines(
        &queries, trained, index, untrained, source, vos, classes, config,
    )?;
    rows.extend(run_video_baselines(
        &test, trained, index, source, vos, classes, config,
    )?);
    Ok(rows)
}
