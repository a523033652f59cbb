//! Exact cosine retrieval over an embedding index of annotated frames.

mod format;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoder::{embed, fingerprint, EncoderError, EncoderParams};
use crate::synthvideo::{
    frame_rel_path, mask_rel_path, read_frame, read_mask, Dataset, Frame, Mask, SynthError,
};

pub use format::{decode_index, encode_index, load_index, save_index, INDEX_VERSION};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding has dimension {actual}, index uses {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("malformed index: {0}")]
    Format(String),
    #[error("index was built with a different encoder (fingerprint mismatch)")]
    FingerprintMismatch,
    #[error("no entry with id {0}")]
    UnknownId(u64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub video_id: u64,
    pub frame_index: u32,
    pub embedding: Vec<f32>,
    pub frame_path: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub fingerprint: [u8; 32],
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub similarity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub embedding: Vec<f32>,
    pub similarity: f32,
}

#[inline]
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

impl EmbeddingIndex {
    pub fn new(dim: usize, fingerprint: [u8; 32]) -> Self {
        Self {
            dim,
            fingerprint,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry lookup; ids are positions when built by [`build_index`].
    pub fn get(&self, id: u64) -> Option<&IndexEntry> {
        match self.entries.get(id as usize) {
            Some(e) if e.id == id => Some(e),
            _ => self.entries.iter().find(|e| e.id == id),
        }
    }

    fn check_query(&self, query: &[f32]) -> Result<(), RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(RetrievalError::Dimension {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    pub fn candidate(&self, hit: &Hit) -> Result<Candidate, RetrievalError> {
        let e = self.get(hit.id).ok_or(RetrievalError::UnknownId(hit.id))?;
        Ok(Candidate {
            id: e.id,
            embedding: e.embedding.clone(),
            similarity: hit.similarity,
        })
    }
}

/// One entry per annotated frame of the training split, embedded with
/// `params`. Paths are the dataset layout paths joined onto `data_dir`.
pub fn build_index(
    dataset: &Dataset,
    data_dir: &Path,
    params: &EncoderParams<f32>,
) -> Result<EmbeddingIndex, RetrievalError> {
    let mut index = EmbeddingIndex::new(params.arch.dim, fingerprint(params));
    for video in dataset.train_videos() {
        if !video.is_annotated() {
            continue;
        }
        for (t, frame) in video.frames.iter().enumerate() {
            index.entries.push(IndexEntry {
                id: index.entries.len() as u64,
                video_id: video.id,
                frame_index: t as u32,
                embedding: embed(params, frame)?,
                frame_path: data_dir
                    .join(frame_rel_path(video.id, t))
                    .to_string_lossy()
                    .into_owned(),
                mask_path: data_dir
                    .join(mask_rel_path(video.id, t))
                    .to_string_lossy()
                    .into_owned(),
            });
        }
    }
    Ok(index)
}

/// Exact top-k by cosine, descending; ties by ascending id.
pub fn topk(index: &EmbeddingIndex, query: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
    index.check_query(query)?;
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let mut hits: Vec<Hit> = index
        .entries
        .iter()
        .map(|e| Hit {
            id: e.id,
            similarity: cosine(query, &e.embedding),
        })
        .collect();
    let order = |a: &Hit, b: &Hit| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id));
    let k = k.min(hits.len());
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    Ok(hits)
}

/// Greedy relevance/diversity selection. The first pick is the most
/// query-similar candidate; later picks maximize
/// `sim(c, q) - lambda * max_{s in selected} sim(c, s)`. Ties by ascending id.
pub fn diverse_select(candidates: &[Candidate], q: usize, lambda: f32) -> Vec<u64> {
    let q = q.min(candidates.len());
    let mut selected: Vec<usize> = Vec::with_capacity(q);
    let mut redundancy = vec![f32::NEG_INFINITY; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    while selected.len() < q {
        let mut best: Option<(f32, u64, usize)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = if selected.is_empty() {
                c.similarity
            } else {
                c.similarity - lambda * redundancy[i]
            };
            let better = match best {
                None => true,
                Some((s, id, _)) => score > s || (score == s && c.id < id),
            };
            if better {
                best = Some((score, c.id, i));
            }
        }
        let (_, _, pick) = best.expect("q bounded by candidate count");
        taken[pick] = true;
        selected.push(pick);
        for (i, c) in candidates.iter().enumerate() {
            if !taken[i] {
                redundancy[i] =
                    redundancy[i].max(cosine(&c.embedding, &candidates[pick].embedding));
            }
        }
    }
    selected.into_iter().map(|i| candidates[i].id).collect()
}

/// `s_t = max_d cos(z_t, d)` for each embedded frame.
pub fn frame_scores_from_embeddings(
    index: &EmbeddingIndex,
    z: &[Vec<f32>],
) -> Result<Vec<f32>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    z.iter()
        .map(|zt| {
            index.check_query(zt)?;
            Ok(index
                .entries
                .iter()
                .map(|e| cosine(zt, &e.embedding))
                .fold(f32::NEG_INFINITY, f32::max))
        })
        .collect()
}

pub fn frame_scores(
    index: &EmbeddingIndex,
    frames: &[Frame],
    params: &EncoderParams<f32>,
) -> Result<Vec<f32>, RetrievalError> {
    let z = frames
        .iter()
        .map(|f| embed(params, f))
        .collect::<Result<Vec<_>, _>>()?;
    frame_scores_from_embeddings(index, &z)
}

/// Resolves index entries to pixels and labels.
pub trait FrameSource {
    fn frame(&self, entry: &IndexEntry) -> Result<Frame, RetrievalError>;
    fn mask(&self, entry: &IndexEntry) -> Result<Mask, RetrievalError>;
}

/// Reads the PGM files named by each entry.
pub struct FileSource;

impl FrameSource for FileSource {
    fn frame(&self, entry: &IndexEntry) -> Result<Frame, RetrievalError> {
        Ok(read_frame(Path::new(&entry.frame_path))?)
    }

    fn mask(&self, entry: &IndexEntry) -> Result<Mask, RetrievalError> {
        Ok(read_mask(Path::new(&entry.mask_path))?)
    }
}

/// Looks entries up in an in-memory dataset by `(video_id, frame_index)`.
pub struct DatasetSource<'a>(pub &'a Dataset);

impl DatasetSource<'_> {
    fn locate(&self, entry: &IndexEntry) -> Result<&crate::synthvideo::Video, RetrievalError> {
        self.0
            .video(entry.video_id)
            .filter(|v| (entry.frame_index as usize) < v.len())
            .ok_or_else(|| {
                RetrievalError::Format(format!("entry {} not found in dataset", entry.id))
            })
    }
}

impl FrameSource for DatasetSource<'_> {
    fn frame(&self, entry: &IndexEntry) -> Result<Frame, RetrievalError> {
        Ok(self.locate(entry)?.frames[entry.frame_index as usize].clone())
    }

    fn mask(&self, entry: &IndexEntry) -> Result<Mask, RetrievalError> {
        self.locate(entry)?
            .mask(entry.frame_index as usize)
            .cloned()
            .ok_or_else(|| RetrievalError::Format(format!("entry {} has no mask", entry.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{normalize, Architecture};
    use crate::synthvideo::{generate_dataset, DatasetSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_index(n: usize, d: usize, rng: &mut impl Rng) -> EmbeddingIndex {
        let mut index = EmbeddingIndex::new(d, [7; 32]);
        for id in 0..n as u64 {
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.entries.push(IndexEntry {
                id,
                video_id: id / 10,
                frame_index: (id % 10) as u32,
                embedding: normalize(&v),
                frame_path: format!("f{id}.pgm"),
                mask_path: format!("m{id}.pgm"),
            });
        }
        index
    }

    fn unit(v: &[f32]) -> Vec<f32> {
        normalize(v)
    }

    fn cand(id: u64, v: &[f32], q: &[f32]) -> Candidate {
        let e = unit(v);
        Candidate {
            id,
            similarity: cosine(&e, q),
            embedding: e,
        }
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let index = random_index(2000, 16, &mut rng);
        for _ in 0..5 {
            let q = unit(
                &(0..16)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f32>>(),
            );
            let mut all: Vec<(f32, u64)> = index
                .entries
                .iter()
                .map(|e| {
                    (
                        e.embedding.iter().zip(&q).map(|(a, b)| a * b).sum::<f32>(),
                        e.id,
                    )
                })
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let got = topk(&index, &q, 25).unwrap();
            let expect: Vec<(f32, u64)> = all[..25].to_vec();
            assert_eq!(
                got.iter().map(|h| (h.similarity, h.id)).collect::<Vec<_>>(),
                expect
            );
        }
    }

    #[test]
    fn topk_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let index = random_index(5, 8, &mut rng);
        let q = index.entries[3].embedding.clone();
        let hits = topk(&index, &q, 10).unwrap();
        assert_eq!(hits.len(), 5);
        assert_eq!(hits[0].id, 3);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert!(matches!(topk(&index, &q, 0), Err(RetrievalError::InvalidK)));
        assert!(matches!(
            topk(&index, &q[..4], 1),
            Err(RetrievalError::Dimension { .. })
        ));
        let empty = EmbeddingIndex::new(8, [0; 32]);
        assert!(matches!(
            topk(&empty, &q, 1),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn topk_ties_by_id() {
        let mut index = EmbeddingIndex::new(2, [0; 32]);
        for id in [4u64, 1, 3] {
            index.entries.push(IndexEntry {
                id,
                video_id: 0,
                frame_index: 0,
                embedding: vec![1.0, 0.0],
                frame_path: String::new(),
                mask_path: String::new(),
            });
        }
        let ids: Vec<u64> = topk(&index, &[1.0, 0.0], 3)
            .unwrap()
            .iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(ids, vec![1, 3, 4]);
    }

    #[test]
    fn hand_evaluated_diverse_pick() {
        let q = [1.0, 0.0];
        let c = vec![
            cand(0, &[1.0, 0.0], &q),
            cand(1, &[1.0, 0.0], &q),
            cand(2, &[0.8, 0.6], &q),
        ];
        assert_eq!(diverse_select(&c, 2, 0.7), vec![0, 1]);
        assert_eq!(diverse_select(&c, 3, 0.7), vec![0, 1, 2]);
    }

    /// Exhaustive per-step argmax in f64 over the remaining candidates.
    fn greedy_oracle(c: &[Candidate], q: usize, lambda: f32) -> Vec<u64> {
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..q {
            let scores: Vec<(usize, f32)> = (0..c.len())
                .filter(|i| !chosen.contains(i))
                .map(|i| {
                    let red = chosen
                        .iter()
                        .map(|&s| cosine(&c[i].embedding, &c[s].embedding))
                        .fold(f32::NEG_INFINITY, f32::max);
                    (
                        i,
                        if chosen.is_empty() {
                            c[i].similarity
                        } else {
                            c[i].similarity - lambda * red
                        },
                    )
                })
                .collect();
            let best = scores
                .iter()
                .copied()
                .reduce(|a, b| {
                    if b.1 > a.1 || (b.1 == a.1 && c[b.0].id < c[a.0].id) {
                        b
                    } else {
                        a
                    }
                })
                .unwrap();
            chosen.push(best.0);
        }
        chosen.into_iter().map(|i| c[i].id).collect()
    }

    proptest! {
        #[test]
        fn diverse_matches_oracle(seed in any::<u64>(), n in 1usize..=8, li in 0usize..4) {
            let lambda = [0.0, 0.5, 0.7, 1.0][li];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = unit(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5]);
            let c: Vec<Candidate> = (0..n)
                .map(|i| cand(i as u64 * 3 % 11, &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)], &q))
                .collect();
            for qq in 1..=n {
                let got = diverse_select(&c, qq, lambda);
                prop_assert_eq!(&got, &greedy_oracle(&c, qq, lambda));
                let mut dedup = got.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), qq);
            }
            let top: Vec<u64> = {
                let mut s: Vec<&Candidate> = c.iter().collect();
                s.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
                s.iter().map(|x| x.id).collect()
            };
            prop_assert_eq!(diverse_select(&c, n, 0.0), top);
        }

        #[test]
        fn frame_scores_monotone_under_growth(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let big = random_index(40, 8, &mut rng);
            let mut small = big.clone();
            small.entries.truncate(20);
            let z: Vec<Vec<f32>> = (0..5).map(|_| unit(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>())).collect();
            let a = frame_scores_from_embeddings(&small, &z).unwrap();
            let b = frame_scores_from_embeddings(&big, &z).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        }
    }

    #[test]
    fn build_index_covers_training_frames() {
        let d = generate_dataset(&DatasetSpec {
            num_videos: 5,
            frames_per_video: 4,
            image_size: 16,
            num_classes: 1,
            ..Default::default()
        })
        .unwrap();
        let p = EncoderParams::init(
            Architecture::with_channels(16, 16, &[2, 4], 8),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let index = build_index(&d, Path::new("data"), &p).unwrap();
        assert_eq!(index.len(), d.train_videos().len() * 4);
        assert_eq!(index, build_index(&d, Path::new("data"), &p).unwrap());
        let e = &index.entries[0];
        let frame = DatasetSource(&d).frame(e).unwrap();
        let scores = frame_scores(&index, &[frame], &p).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-6);
        assert!(e.frame_path.starts_with("data"));
    }
}
