//! Video object segmentation interface and bidirectional propagation.
//!
//! A [`VosModel`] segments a sequence whose leading frames carry prompt
//! masks; every prediction may depend only on the prompts and on earlier
//! frames. [`propagate_bidirectional`] builds multi-prompt propagation on top
//! of single-prompt forward and backward passes.

mod adapter;
mod reference;

use std::cmp::Ordering;

use thiserror::Error;

use crate::synthvideo::{Frame, Mask};

pub use adapter::{AdapterPrompt, AdapterRequest, AdapterResponse};
pub use reference::{PropagatorConfig, ReferencePropagator};

#[derive(Debug, Error, PartialEq)]
pub enum VosError {
    #[error("at least one prompt is required")]
    NoPrompts,
    #[error("prompt for frame {index} is outside the {len}-frame sequence")]
    PromptIndex { index: usize, len: usize },
    #[error("frame {index} is prompted twice")]
    DuplicatePrompt { index: usize },
    #[error("prompted frames must form a prefix of the sequence; got prompt at {index}")]
    PromptOrder { index: usize },
    #[error("dimension mismatch at frame {index}: expected {expected:?}, got {actual:?}")]
    Dimension {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid adapter message: {0}")]
    Adapter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VosPrompt {
    pub frame_index: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub frame_index: usize,
    pub mask: Mask,
    /// Frame confidence in `[0, 1]`.
    pub confidence: f32,
    /// Winning-class probability per pixel, when the model provides it.
    pub pixel_confidence: Option<Vec<f32>>,
}

impl MaskPrediction {
    pub fn from_prompt(p: &VosPrompt) -> Self {
        Self {
            frame_index: p.frame_index,
            mask: p.mask.clone(),
            confidence: 1.0,
            pixel_confidence: None,
        }
    }
}

pub trait VosModel {
    /// Segments `frames[prompts.len()..]` given prompts for the leading
    /// frames. Returns one prediction per unprompted frame, in order.
    fn segment_sequence(
        &self,
        frames: &[Frame],
        prompts: &[VosPrompt],
    ) -> Result<Vec<MaskPrediction>, VosError>;
}

/// Checks that prompts cover exactly `0..prompts.len()` and that all
/// frames and masks share one size.
pub fn validate_prefix(frames: &[Frame], prompts: &[VosPrompt]) -> Result<(), VosError> {
    if prompts.is_empty() {
        return Err(VosError::NoPrompts);
    }
    let dims = frames[0].dims();
    for (index, f) in frames.iter().enumerate() {
        if f.dims() != dims {
            return Err(VosError::Dimension {
                index,
                expected: dims,
                actual: f.dims(),
            });
        }
    }
    for (k, p) in prompts.iter().enumerate() {
        if p.frame_index >= frames.len() {
            return Err(VosError::PromptIndex {
                index: p.frame_index,
                len: frames.len(),
            });
        }
        if p.frame_index != k {
            return Err(VosError::PromptOrder {
                index: p.frame_index,
            });
        }
        if p.mask.dims() != dims {
            return Err(VosError::Dimension {
                index: p.frame_index,
                expected: dims,
                actual: p.mask.dims(),
            });
        }
    }
    Ok(())
}

/// Preference between two predictions for the same frame: higher
/// confidence, then the lexicographically smaller mask and pixel confidences.
fn prefer(a: &MaskPrediction, b: &MaskPrediction) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.mask.labels().cmp(b.mask.labels()))
        .then_with(|| {
            let pa = a.pixel_confidence.as_deref().unwrap_or(&[]);
            let pb = b.pixel_confidence.as_deref().unwrap_or(&[]);
            pa.iter()
                .zip(pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(pa.len().cmp(&pb.len()))
        })
}

/// Masks for every frame from prompts anywhere in the video.
///
/// Each unprompted frame takes the prediction of its temporally nearest
/// prompt, obtained by a single-prompt pass running from that prompt toward
/// the frame. A frame equidistant from two prompts gets both predictions and
/// keeps the preferred one. Prompted frames return their masks verbatim.
pub fn propagate_bidirectional(
    model: &dyn VosModel,
    frames: &[Frame],
    prompts: &[VosPrompt],
) -> Result<Vec<MaskPrediction>, VosError> {
    if prompts.is_empty() {
        return Err(VosError::NoPrompts);
    }
    let len = frames.len();
    let mut sorted: Vec<&VosPrompt> = prompts.iter().collect();
    sorted.sort_by_key(|p| p.frame_index);
    for w in sorted.windows(2) {
        if w[0].frame_index == w[1].frame_index {
            return Err(VosError::DuplicatePrompt {
                index: w[0].frame_index,
            });
        }
    }
    if let Some(p) = sorted.iter().find(|p| p.frame_index >= len) {
        return Err(VosError::PromptIndex {
            index: p.frame_index,
            len,
        });
    }
    let mut out: Vec<Option<MaskPrediction>> = vec![None; len];
    for (k, p) in sorted.iter().enumerate() {
        let i = p.frame_index;
        out[i] = Some(MaskPrediction::from_prompt(p));
        // forward reach: up to the midpoint with the next prompt, inclusive on ties
        let fwd_end = match sorted.get(k + 1) {
            Some(next) => (i + next.frame_index) / 2,
            None => len - 1,
        };
        // backward reach: down to the midpoint with the previous prompt
        let bwd_end = match k.checked_sub(1).map(|j| sorted[j]) {
            Some(prev) => (prev.frame_index + i).div_ceil(2),
            None => 0,
        };
        let passes = [
            (fwd_end > i).then(|| (i..=fwd_end).collect::<Vec<_>>()),
            (bwd_end < i).then(|| (bwd_end..=i).rev().collect::<Vec<_>>()),
        ];
        for order in passes.into_iter().flatten() {
            let seq: Vec<Frame> = order.iter().map(|&t| frames[t].clone()).collect();
            let prompt = VosPrompt {
                frame_index: 0,
                mask: p.mask.clone(),
            };
            let preds = model.segment_sequence(&seq, &[prompt])?;
            for (pred, &t) in preds.into_iter().zip(&order[1..]) {
                let pred = MaskPrediction {
                    frame_index: t,
                    ..pred
                };
                let keep = match &out[t] {
                    None => true,
                    Some(existing) => prefer(&pred, existing) == Ordering::Less,
                };
                if keep {
                    out[t] = Some(pred);
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|p| p.expect("every frame is reached"))
        .collect())
}

/// Foreground labels that occur in any prompt.
pub fn prompt_labels(prompts: &[VosPrompt]) -> Vec<u8> {
    let mut seen = [false; 256];
    for p in prompts {
        for &l in p.mask.labels() {
            seen[l as usize] = true;
        }
    }
    (1..=255u8).filter(|&l| seen[l as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Copies the latest prompt or prediction forward; confidence decays with
    /// distance so tie-breaking is observable.
    struct CopyModel;

    impl VosModel for CopyModel {
        fn segment_sequence(
            &self,
            frames: &[Frame],
            prompts: &[VosPrompt],
        ) -> Result<Vec<MaskPrediction>, VosError> {
            validate_prefix(frames, prompts)?;
            let last = &prompts.last().unwrap().mask;
            Ok((prompts.len()..frames.len())
                .map(|t| MaskPrediction {
                    frame_index: t,
                    mask: last.clone(),
                    confidence: 1.0 / (t as f32 + 1.0),
                    pixel_confidence: None,
                })
                .collect())
        }
    }

    fn frames(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| Frame::filled(16, 16, i as u8).unwrap())
            .collect()
    }

    fn mask(v: u8) -> Mask {
        Mask::new(16, 16, vec![v; 256]).unwrap()
    }

    #[test]
    fn nearest_prompt_wins() {
        let prompts = vec![
            VosPrompt {
                frame_index: 1,
                mask: mask(1),
            },
            VosPrompt {
                frame_index: 7,
                mask: mask(2),
            },
        ];
        let out = propagate_bidirectional(&CopyModel, &frames(10), &prompts).unwrap();
        let labels: Vec<u8> = out.iter().map(|p| p.mask.labels()[0]).collect();
        // frame 4 is equidistant; both passes give confidence 1/4, mask 1 is smaller
        assert_eq!(labels, vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert_eq!(out[1].confidence, 1.0);
        assert_eq!(
            out.iter().map(|p| p.frame_index).collect::<Vec<_>>(),
            (0..10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn prompts_everywhere_is_identity() {
        let prompts: Vec<VosPrompt> = (0..5)
            .map(|i| VosPrompt {
                frame_index: i,
                mask: mask(i as u8),
            })
            .collect();
        let out = propagate_bidirectional(&CopyModel, &frames(5), &prompts).unwrap();
        for (o, p) in out.iter().zip(&prompts) {
            assert_eq!(o.mask, p.mask);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            propagate_bidirectional(&CopyModel, &frames(3), &[]),
            Err(VosError::NoPrompts)
        );
        let dup = vec![
            VosPrompt {
                frame_index: 1,
                mask: mask(1),
            },
            VosPrompt {
                frame_index: 1,
                mask: mask(1),
            },
        ];
        assert_eq!(
            propagate_bidirectional(&CopyModel, &frames(3), &dup),
            Err(VosError::DuplicatePrompt { index: 1 })
        );
        let far = vec![VosPrompt {
            frame_index: 9,
            mask: mask(1),
        }];
        assert!(matches!(
            propagate_bidirectional(&CopyModel, &frames(3), &far),
            Err(VosError::PromptIndex { .. })
        ));
        let gap = vec![VosPrompt {
            frame_index: 1,
            mask: mask(1),
        }];
        assert_eq!(
            validate_prefix(&frames(3), &gap),
            Err(VosError::PromptOrder { index: 1 })
        );
    }
}
