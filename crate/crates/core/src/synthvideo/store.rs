use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pgm, Dataset, DatasetSpec, Frame, Mask, Split, SynthError, Video};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub videos: Vec<ManifestVideo>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: u64,
    pub frames: Vec<String>,
    #[serde(default)]
    pub masks: Vec<String>,
}

pub fn frame_rel_path(video: u64, t: usize) -> String {
    format!("videos/{video:06}/frame_{t:04}.pgm")
}

pub fn mask_rel_path(video: u64, t: usize) -> String {
    format!("videos/{video:06}/mask_{t:04}.pgm")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes PGM frames/masks plus `manifest.json`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf, SynthError> {
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for video in &dataset.videos {
        video.validate()?;
        let mut entry = ManifestVideo {
            id: video.id,
            frames: Vec::with_capacity(video.len()),
            masks: Vec::new(),
        };
        for (t, frame) in video.frames.iter().enumerate() {
            let rel = frame_rel_path(video.id, t);
            write_file(
                &dir.join(&rel),
                &pgm::encode(frame.width(), frame.height(), frame.pixels()),
            )?;
            entry.frames.push(rel);
        }
        if let Some(masks) = &video.masks {
            for (t, mask) in masks.iter().enumerate() {
                let rel = mask_rel_path(video.id, t);
                write_file(
                    &dir.join(&rel),
                    &pgm::encode(mask.width(), mask.height(), mask.labels()),
                )?;
                entry.masks.push(rel);
            }
        }
        videos.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: dataset.spec.clone(),
        videos,
        split: dataset.split.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, &json)?;
    Ok(path)
}

fn check_relative(path: &str) -> Result<(), SynthError> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(SynthError::Manifest(format!(
            "path `{path}` must be relative and stay inside the dataset directory"
        )))
    }
}

/// Parses and structurally validates manifest bytes without touching the filesystem.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest, SynthError> {
    let manifest: Manifest =
        serde_json::from_slice(bytes).map_err(|e| SynthError::Manifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SynthError::Manifest(format!(
            "unsupported version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut ids = BTreeSet::new();
    for video in &manifest.videos {
        if !ids.insert(video.id) {
            return Err(SynthError::Manifest(format!(
                "duplicate video id {}",
                video.id
            )));
        }
        if video.frames.is_empty() {
            return Err(SynthError::Manifest(format!(
                "video {} lists no frames",
                video.id
            )));
        }
        if !video.masks.is_empty() && video.masks.len() != video.frames.len() {
            return Err(SynthError::MaskCount {
                video: video.id,
                frames: video.frames.len(),
                masks: video.masks.len(),
            });
        }
        for p in video.frames.iter().chain(&video.masks) {
            check_relative(p)?;
        }
    }
    for id in manifest.split.train.iter().chain(&manifest.split.test) {
        if !ids.contains(id) {
            return Err(SynthError::Manifest(format!(
                "split references unknown video {id}"
            )));
        }
    }
    Ok(manifest)
}

fn read_pgm(path: &Path) -> Result<pgm::Raster, SynthError> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SynthError::MissingFile(path.to_path_buf())
        } else {
            SynthError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    pgm::decode(&bytes).map_err(|source| SynthError::Pgm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_frame(path: &Path) -> Result<Frame, SynthError> {
    let (w, h, px) = read_pgm(path)?;
    Frame::new(w, h, px)
}

pub fn read_mask(path: &Path) -> Result<Mask, SynthError> {
    let (w, h, px) = read_pgm(path)?;
    Mask::new(w, h, px)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), SynthError> {
    write_file(
        path,
        &pgm::encode(mask.width(), mask.height(), mask.labels()),
    )
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), SynthError> {
    write_file(
        path,
        &pgm::encode(frame.width(), frame.height(), frame.pixels()),
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SynthError::MissingFile(manifest_path.clone())
        } else {
            SynthError::Io {
                path: manifest_path.clone(),
                source: e,
            }
        }
    })?;
    let manifest = parse_manifest(&bytes)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let frames = entry
            .frames
            .iter()
            .map(|p| read_frame(&dir.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let dims = frames[0].dims();
        for (p, f) in entry.frames.iter().zip(&frames) {
            if f.dims() != dims {
                return Err(SynthError::DimensionMismatch {
                    what: p.clone(),
                    expected: dims,
                    actual: f.dims(),
                });
            }
        }
        let masks = if entry.masks.is_empty() {
            None
        } else {
            let mut masks = Vec::with_capacity(entry.masks.len());
            for p in &entry.masks {
                let m = read_mask(&dir.join(p))?;
                if m.dims() != dims {
                    return Err(SynthError::DimensionMismatch {
                        what: p.clone(),
                        expected: dims,
                        actual: m.dims(),
                    });
                }
                masks.push(m);
            }
            Some(masks)
        };
        videos.push(Video::new(entry.id, frames, masks)?);
    }
    Ok(Dataset {
        spec: manifest.spec,
        videos,
        split: manifest.split,
    })
}

/// Loads `frame_*.pgm` (and `mask_*.pgm` when every frame has one) from a
/// single video directory, sorted by file name.
pub fn load_frames_dir(dir: &Path) -> Result<(Vec<Frame>, Option<Vec<Mask>>), SynthError> {
    let mut frame_names = Vec::new();
    let mut mask_names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.ends_with(".pgm") {
            continue;
        }
        if name.starts_with("frame_") {
            frame_names.push(name);
        } else if name.starts_with("mask_") {
            mask_names.push(name);
        }
    }
    frame_names.sort();
    mask_names.sort();
    if frame_names.is_empty() {
        return Err(SynthError::MissingFile(dir.join("frame_*.pgm")));
    }
    let frames = frame_names
        .iter()
        .map(|n| read_frame(&dir.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    let dims = frames[0].dims();
    if let Some((n, f)) = frame_names
        .iter()
        .zip(&frames)
        .find(|(_, f)| f.dims() != dims)
    {
        return Err(SynthError::DimensionMismatch {
            what: n.clone(),
            expected: dims,
            actual: f.dims(),
        });
    }
    let masks = if mask_names.len() == frame_names.len() {
        let masks = mask_names
            .iter()
            .map(|n| read_mask(&dir.join(n)))
            .collect::<Result<Vec<_>, _>>()?;
        Some(masks)
    } else {
        None
    };
    Ok((frames, masks))
}
