//! Minibatch assembly for time-contrastive pretraining.
//!
//! A clip of `N` frames yields a single-view label matrix `A` (temporal window
//! positives, zero diagonal). Two augmented views expand it to
//! `[[A, A+I], [A+I, A]]`, and `B` clips compose block-diagonally so that rows
//! from different clips are always negatives.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthvideo::Frame;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("invalid clip spec: {0}")]
    InvalidSpec(String),
    #[error("video of length {len} is shorter than the required clip span {required}")]
    VideoTooShort { len: usize, required: usize },
    #[error("minibatch needs at least one clip")]
    EmptyBatch,
    #[error("clip has {actual} frames, spec expects {expected}")]
    ClipLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingMode {
    /// Every frame within `floor(W/2)` of the anchor is a positive.
    #[default]
    FullWindow,
    /// Each anchor keeps `M-1` positives drawn from its window, then the
    /// matrix is symmetrized by OR.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_len: usize,
    pub window: usize,
    /// Window slots including the anchor; each anchor gets `positives - 1`
    /// within-view positives in sampled mode.
    pub positives: usize,
    pub stride: usize,
    #[serde(default)]
    pub labeling: LabelingMode,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            clip_len: 16,
            window: 2,
            positives: 2,
            stride: 2,
            labeling: LabelingMode::FullWindow,
        }
    }
}

impl ClipSpec {
    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    /// Frames spanned by one clip in the source video.
    pub fn span(&self) -> usize {
        (self.clip_len - 1) * self.stride + 1
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let err = |m: String| Err(SamplerError::InvalidSpec(m));
        if self.clip_len < 2 {
            return err(format!("clip_len {} must be at least 2", self.clip_len));
        }
        let half = self.half_window();
        // windows wider than the clip are clamped at its boundaries
        if half < 1 {
            return err(format!("floor(window/2) = {half} must be at least 1"));
        }
        if self.positives < 2 || self.positives > self.window + 1 {
            return err(format!(
                "positives {} must lie in 2..={}",
                self.positives,
                self.window + 1
            ));
        }
        if self.stride < 1 {
            return err("stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Contiguous strided frame indices drawn from one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub video_id: u64,
    pub start: usize,
    pub frame_indices: Vec<usize>,
}

/// Square binary matrix stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    size: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for LabelMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "LabelMatrix({})", self.size)?;
        for i in 0..self.size {
            let row: String = (0..self.size)
                .map(|j| if self.get(i, j) { '1' } else { '0' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl LabelMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(size);
        for i in 0..size {
            for j in 0..size {
                m.bits[i * size + j] = f(i, j);
            }
        }
        m
    }

    /// Builds from `0/1` rows; panics on ragged input.
    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let n = rows.len();
        Self::from_fn(n, |i, j| {
            assert_eq!(rows[i].len(), n, "ragged label rows");
            rows[i][j] != 0
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.size + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.size..(i + 1) * self.size]
    }

    pub fn positives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
    }

    pub fn positive_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.size).all(|i| !self.get(i, i))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.size)
            .map(|i| self.row(i).iter().map(|&b| u8::from(b)).collect())
            .collect()
    }
}

pub fn sample_clip(
    video_id: u64,
    video_len: usize,
    spec: &ClipSpec,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Clip, SamplerError> {
    spec.validate()?;
    let span = spec.span();
    if video_len < span {
        return Err(SamplerError::VideoTooShort {
            len: video_len,
            required: span,
        });
    }
    let start = rng.random_range(0..=video_len - span);
    Ok(Clip {
        video_id,
        start,
        frame_indices: (0..spec.clip_len)
            .map(|k| start + k * spec.stride)
            .collect(),
    })
}

/// Single-view positive matrix `A` for one clip.
pub fn build_label_matrix(
    spec: &ClipSpec,
    rng: &mut (impl Rng + ?Sized),
) -> Result<LabelMatrix, SamplerError> {
    spec.validate()?;
    let n = spec.clip_len;
    let half = spec.half_window();
    let window =
        |i: usize| (i.saturating_sub(half)..=(i + half).min(n - 1)).filter(move |&j| j != i);
    let a = match spec.labeling {
        LabelingMode::FullWindow => LabelMatrix::from_fn(n, |i, j| i != j && i.abs_diff(j) <= half),
        LabelingMode::Sampled => {
            let mut a = LabelMatrix::zeros(n);
            for i in 0..n {
                let candidates: Vec<usize> = window(i).collect();
                let take = (spec.positives - 1).min(candidates.len());
                for k in index::sample(rng, candidates.len(), take) {
                    let j = candidates[k];
                    a.set(i, j, true);
                    a.set(j, i, true);
                }
            }
            a
        }
    };
    Ok(a)
}

/// Two-view expansion `[[A, A+I], [A+I, A]]`.
pub fn expand_multiview(a: &LabelMatrix) -> LabelMatrix {
    let n = a.size();
    LabelMatrix::from_fn(2 * n, |r, c| {
        let (i, j) = (r % n, c % n);
        let cross_view = (r < n) != (c < n);
        a.get(i, j) || (cross_view && i == j)
    })
}

pub fn block_diagonal(blocks: &[LabelMatrix]) -> LabelMatrix {
    let total = blocks.iter().map(LabelMatrix::size).sum();
    let mut out = LabelMatrix::zeros(total);
    let mut offset = 0;
    for b in blocks {
        for i in 0..b.size() {
            for j in b.positives(i) {
                out.set(offset + i, offset + j, true);
            }
        }
        offset += b.size();
    }
    out
}

/// Produces one augmented view of a clip's frames. All frames in a view
/// share the same geometric draw.
pub trait ViewAugmenter {
    fn augment_view(&self, frames: &[Frame], rng: &mut dyn rand::RngCore) -> Vec<Frame>;
}

/// Augmenter that returns frames unchanged.
pub struct NoAugment;

impl ViewAugmenter for NoAugment {
    fn augment_view(&self, frames: &[Frame], _rng: &mut dyn rand::RngCore) -> Vec<Frame> {
        frames.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    pub video_id: u64,
    pub frame_index: usize,
    pub view: u8,
    pub clip: usize,
}

/// Rows are ordered clip-major, then view, then clip position.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub views: Vec<[Vec<Frame>; 2]>,
    pub labels: LabelMatrix,
    pub provenance: Vec<RowOrigin>,
}

impl Minibatch {
    pub fn rows(&self) -> usize {
        self.provenance.len()
    }

    /// Frames in row order.
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.views
            .iter()
            .flat_map(|[a, b]| a.iter().chain(b.iter()))
    }
}

pub fn build_minibatch(
    clips: &[(Clip, Vec<Frame>)],
    spec: &ClipSpec,
    augmenter: &dyn ViewAugmenter,
    rng: &mut dyn rand::RngCore,
) -> Result<Minibatch, SamplerError> {
    spec.validate()?;
    if clips.is_empty() {
        return Err(SamplerError::EmptyBatch);
    }
    let mut views = Vec::with_capacity(clips.len());
    let mut blocks = Vec::with_capacity(clips.len());
    let mut provenance = Vec::with_capacity(2 * clips.len() * spec.clip_len);
    for (b, (clip, frames)) in clips.iter().enumerate() {
        if frames.len() != spec.clip_len || clip.frame_indices.len() != spec.clip_len {
            return Err(SamplerError::ClipLength {
                expected: spec.clip_len,
                actual: frames.len(),
            });
        }
        let v0 = augmenter.augment_view(frames, rng);
        let v1 = augmenter.augment_view(frames, rng);
        views.push([v0, v1]);
        blocks.push(expand_multiview(&build_label_matrix(spec, rng)?));
        for view in 0..2u8 {
            for &frame_index in &clip.frame_indices {
                provenance.push(RowOrigin {
                    video_id: clip.video_id,
                    frame_index,
                    view,
                    clip: b,
                });
            }
        }
    }
    Ok(Minibatch {
        views,
        labels: block_diagonal(&blocks),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize, w: usize, m: usize) -> ClipSpec {
        ClipSpec {
            clip_len: n,
            window: w,
            positives: m,
            stride: 1,
            labeling: LabelingMode::FullWindow,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn hand_evaluated_matrices() {
        let a = build_label_matrix(&spec(4, 2, 2), &mut rng()).unwrap();
        assert_eq!(
            a,
            LabelMatrix::from_rows(&[&[0, 1, 0, 0], &[1, 0, 1, 0], &[0, 1, 0, 1], &[0, 0, 1, 0]])
        );

        for w in [2, 3, 4] {
            let a = build_label_matrix(&spec(2, w, 2), &mut rng()).unwrap();
            assert_eq!(a, LabelMatrix::from_rows(&[&[0, 1], &[1, 0]]));
        }

        let a = build_label_matrix(&spec(6, 4, 2), &mut rng()).unwrap();
        assert!(a.get(0, 2));
        assert!(!a.get(0, 3));
    }

    #[test]
    fn multiview_expansion() {
        let a = LabelMatrix::from_rows(&[&[0, 1], &[1, 0]]);
        let expected =
            LabelMatrix::from_rows(&[&[0, 1, 1, 1], &[1, 0, 1, 1], &[1, 1, 0, 1], &[1, 1, 1, 0]]);
        assert_eq!(expand_multiview(&a), expected);
        assert_eq!(
            expand_multiview(&LabelMatrix::zeros(1)),
            LabelMatrix::from_rows(&[&[0, 1], &[1, 0]])
        );
    }

    #[test]
    fn clip_sampling_bounds_and_errors() {
        let s = ClipSpec {
            clip_len: 16,
            stride: 2,
            ..Default::default()
        };
        let clip = sample_clip(3, s.span(), &s, &mut rng()).unwrap();
        assert_eq!(clip.start, 0);
        assert_eq!(clip.frame_indices.last(), Some(&30));
        assert_eq!(
            sample_clip(3, 10, &s, &mut rng()),
            Err(SamplerError::VideoTooShort {
                len: 10,
                required: 31
            })
        );
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1, 2, 2).validate().is_err());
        assert!(spec(4, 1, 2).validate().is_err());
        assert!(spec(4, 10, 2).validate().is_ok());
        assert!(spec(4, 2, 4).validate().is_err());
        assert!(spec(4, 2, 1).validate().is_err());
        assert!(spec(4, 2, 3).validate().is_ok());
    }

    #[test]
    fn full_window_interior_positive_count() {
        for (n, w) in [(16, 2), (16, 4), (12, 6)] {
            let s = spec(n, w, 2);
            let hat = expand_multiview(&build_label_matrix(&s, &mut rng()).unwrap());
            let half = w / 2;
            for i in half..n - half {
                assert_eq!(hat.positive_count(i), 2 * (2 * half) + 1);
            }
            assert!(hat.positive_count(0) < 2 * (2 * half) + 1);
        }
    }

    #[test]
    fn sampled_mode_properties() {
        let mut r = rng();
        for _ in 0..50 {
            let s = ClipSpec {
                labeling: LabelingMode::Sampled,
                ..spec(16, 4, 3)
            };
            let a = build_label_matrix(&s, &mut r).unwrap();
            assert!(a.is_symmetric() && a.has_zero_diagonal());
            for i in 0..16 {
                assert!(a.positive_count(i) >= 2);
                assert!(a.positives(i).all(|j| i.abs_diff(j) <= 2));
            }
        }
    }

    #[test]
    fn minibatch_blocks() {
        let s = spec(2, 2, 2);
        let frame = Frame::filled(16, 16, 0).unwrap();
        let clip = |v| Clip {
            video_id: v,
            start: 0,
            frame_indices: vec![0, 1],
        };
        let clips = vec![
            (clip(0), vec![frame.clone(); 2]),
            (clip(1), vec![frame.clone(); 2]),
        ];
        let mb = build_minibatch(&clips, &s, &NoAugment, &mut rng()).unwrap();
        assert_eq!(mb.labels.size(), 8);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(mb.labels.get(i, j), i / 4 == j / 4 && i != j);
            }
        }
        let single = build_minibatch(&clips[..1], &s, &NoAugment, &mut rng()).unwrap();
        let a = build_label_matrix(&s, &mut rng()).unwrap();
        assert_eq!(single.labels, expand_multiview(&a));
        assert!((0..8).all(|i| mb.labels.positive_count(i) >= 1));
        assert_eq!(mb.provenance[5].view, 0);
        assert_eq!(mb.provenance[6].view, 1);
        assert_eq!(mb.provenance[6].clip, 1);
    }

    fn oracle(n: usize, half: usize, b: usize) -> LabelMatrix {
        let rows = 2 * n * b;
        LabelMatrix::from_fn(rows, |r, c| {
            let (cr, vr, ir) = (r / (2 * n), (r / n) % 2, r % n);
            let (cc, vc, ic) = (c / (2 * n), (c / n) % 2, c % n);
            let d = ir.abs_diff(ic);
            cr == cc
                && if vr == vc {
                    d > 0 && d <= half
                } else {
                    d <= half
                }
        })
    }

    proptest::proptest! {
        #[test]
        fn minibatch_matches_pair_oracle(n in 2usize..=8, w in proptest::sample::select(vec![2usize, 4, 6]), b in 1usize..=3, seed in 0u64..1000) {
            let s = ClipSpec { clip_len: n, window: w, positives: 2, stride: 1, labeling: LabelingMode::FullWindow };
            proptest::prop_assume!(s.validate().is_ok());
            let frame = Frame::filled(16, 16, 0).unwrap();
            let clips: Vec<_> = (0..b)
                .map(|v| (Clip { video_id: v as u64, start: 0, frame_indices: (0..n).collect() }, vec![frame.clone(); n]))
                .collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mb = build_minibatch(&clips, &s, &NoAugment, &mut r).unwrap();
            proptest::prop_assert_eq!(&mb.labels, &oracle(n, w / 2, b));
            proptest::prop_assert!(mb.labels.is_symmetric() && mb.labels.has_zero_diagonal());
        }

        #[test]
        fn multiview_symmetric_zero_diagonal(n in 1usize..10, seed in any_u64()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut a = LabelMatrix::zeros(n);
            for i in 0..n {
                for j in 0..i {
                    let v = r.random::<bool>();
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
            let hat = expand_multiview(&a);
            proptest::prop_assert!(hat.is_symmetric() && hat.has_zero_diagonal());
            proptest::prop_assert!((0..2 * n).all(|i| hat.positive_count(i) >= 1));
        }

        #[test]
        fn clip_indices_valid(len in 31usize..200, seed in any_u64()) {
            let s = ClipSpec::default();
            let clip = sample_clip(0, len, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            proptest::prop_assert!(clip.frame_indices.iter().all(|&t| t < len));
            proptest::prop_assert!(clip.frame_indices.windows(2).all(|p| p[1] - p[0] == 2));
        }
    }

    fn any_u64() -> impl proptest::strategy::Strategy<Value = u64> {
        proptest::prelude::any::<u64>()
    }

    #[test]
    fn start_is_uniform() {
        let s = ClipSpec::default();
        let mut r = rng();
        let bins = 100 - s.span() + 1;
        let draws = 10_000;
        let mut hist = vec![0usize; bins];
        for _ in 0..draws {
            hist[sample_clip(0, 100, &s, &mut r).unwrap().start] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let dof = (bins - 1) as f64;
        assert!(
            chi2 < dof + 3.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2} over {dof} dof"
        );
    }
}
