//! `TIDX` index file.
//!
//! ```text
//! "TIDX" | u32 version | u32 dim | u32 count | [u8; 32] encoder fingerprint
//! count x (u64 id | u64 video_id | u32 frame_index | dim x f32
//!          | u32 len | frame path | u32 len | mask path)
//! ```
//! Little-endian throughout; paths are UTF-8.

use std::collections::HashSet;
use std::path::Path;

use super::{EmbeddingIndex, IndexEntry, RetrievalError};

pub const INDEX_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TIDX";
const MAX_DIM: usize = 4096;
const MAX_PATH: usize = 4096;
const NORM_TOLERANCE: f32 = 1e-4;

pub fn encode_index(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&index.fingerprint);
    for e in &index.entries {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.extend_from_slice(&e.video_id.to_le_bytes());
        out.extend_from_slice(&e.frame_index.to_le_bytes());
        for v in &e.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in [&e.frame_path, &e.mask_path] {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p.as_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| RetrievalError::Format(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn path(&mut self, what: &str) -> Result<String, RetrievalError> {
        let len = self.u32(what)? as usize;
        if len > MAX_PATH {
            return Err(RetrievalError::Format(format!(
                "{what} length {len} exceeds {MAX_PATH}"
            )));
        }
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| RetrievalError::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<EmbeddingIndex, RetrievalError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(RetrievalError::Format("bad magic (expected TIDX)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(RetrievalError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let dim = r.u32("dimension")? as usize;
    if dim == 0 || dim > MAX_DIM {
        return Err(RetrievalError::Format(format!(
            "dimension {dim} outside 1..={MAX_DIM}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let min_entry = 20 + 4 * dim + 8;
    if count.saturating_mul(min_entry) > bytes.len() {
        return Err(RetrievalError::Format(format!(
            "entry count {count} exceeds file size"
        )));
    }
    let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
    let mut entries = Vec::with_capacity(count);
    let mut ids = HashSet::with_capacity(count);
    for k in 0..count {
        let id = r.u64("entry id")?;
        if !ids.insert(id) {
            return Err(RetrievalError::Format(format!("duplicate entry id {id}")));
        }
        let video_id = r.u64("video id")?;
        let frame_index = r.u32("frame index")?;
        let embedding: Vec<f32> = r
            .take(4 * dim, "embedding")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let norm = embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(RetrievalError::Format(format!(
                "entry {k} embedding is not unit-norm ({norm})"
            )));
        }
        let frame_path = r.path("frame path")?;
        let mask_path = r.path("mask path")?;
        entries.push(IndexEntry {
            id,
            video_id,
            frame_index,
            embedding,
            frame_path,
            mask_path,
        });
    }
    if r.pos != bytes.len() {
        return Err(RetrievalError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(EmbeddingIndex {
        dim,
        fingerprint,
        entries,
    })
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), RetrievalError> {
    std::fs::write(path, encode_index(index)).map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an index, optionally requiring it to match an encoder fingerprint.
pub fn load_index(
    path: &Path,
    expected: Option<&[u8; 32]>,
) -> Result<EmbeddingIndex, RetrievalError> {
    let bytes = std::fs::read(path).map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let index = decode_index(&bytes)?;
    if let Some(fp) = expected {
        if &index.fingerprint != fp {
            return Err(RetrievalError::FingerprintMismatch);
        }
    }
    Ok(index)
}
