//! Synthetic moving-shape videos with exact ground-truth masks.
//!
//! Frames are 8-bit grayscale over a static textured background; each class
//! is drawn as one shape following a reflected linear + sinusoidal path.

mod frame;
mod generate;
pub mod pgm;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frame::{Frame, Mask, Split, Video, MIN_FRAME_EDGE};
pub use generate::{generate_dataset, plan_video, ShapePlan, VideoPlan};
pub use store::{
    frame_rel_path, load_dataset, load_frames_dir, mask_rel_path, parse_manifest, read_frame,
    read_mask, save_dataset, write_frame, write_mask, Manifest, ManifestVideo, MANIFEST_FILE,
    MANIFEST_VERSION,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset spec: `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("frame {width}x{height} is below the {MIN_FRAME_EDGE}x{MIN_FRAME_EDGE} minimum")]
    FrameTooSmall { width: usize, height: usize },
    #[error("expected {expected} pixels, got {actual}")]
    PixelCount { expected: usize, actual: usize },
    #[error("video {0} has no frames")]
    EmptyVideo(u64),
    #[error("video {video}: {frames} frames but {masks} masks")]
    MaskCount {
        video: u64,
        frames: usize,
        masks: usize,
    },
    #[error("dimension mismatch in {what}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing file {}", .0.display())]
    MissingFile(std::path::PathBuf),
    #[error("{}: {source}", path.display())]
    Pgm {
        path: std::path::PathBuf,
        source: pgm::PgmError,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Ellipse,
}

/// Parameters of a generated dataset. Serialized verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub num_classes: u8,
    pub shape_kinds: Vec<ShapeKind>,
    /// Per-frame sensor noise amplitude in `[0, 1]`.
    pub noise_level: f64,
    /// Upper bound on per-frame shape displacement, pixels.
    pub motion_speed: f64,
    pub seed: u64,
    /// Fraction of videos whose shapes only appear after the first frame.
    #[serde(default)]
    pub late_entry_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            frames_per_video: 60,
            image_size: 64,
            num_classes: 3,
            shape_kinds: vec![ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Ellipse],
            noise_level: 0.3,
            motion_speed: 2.0,
            seed: 0,
            late_entry_fraction: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: &str| {
            Err(SynthError::InvalidSpec {
                field,
                reason: reason.to_string(),
            })
        };
        if self.num_videos == 0 {
            return bad("num_videos", "must be at least 1");
        }
        if self.frames_per_video == 0 {
            return bad("frames_per_video", "must be at least 1");
        }
        if self.image_size < MIN_FRAME_EDGE {
            return bad("image_size", "must be at least 16");
        }
        if self.image_size > pgm::MAX_EDGE {
            return bad("image_size", "exceeds the PGM edge limit");
        }
        if self.num_classes == 0 || self.num_classes == u8::MAX {
            return bad("num_classes", "must be in 1..=254");
        }
        if self.shape_kinds.is_empty() {
            return bad("shape_kinds", "must name at least one shape");
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level", "must lie in [0, 1]");
        }
        if !self.motion_speed.is_finite() || self.motion_speed < 0.0 {
            return bad("motion_speed", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.late_entry_fraction) {
            return bad("late_entry_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Checks the downstream clip-length requirement on top of [`Self::validate`].
    pub fn validate_for_clip(&self, min_frames: usize) -> Result<(), SynthError> {
        self.validate()?;
        if self.frames_per_video < min_frames {
            return Err(SynthError::InvalidSpec {
                field: "frames_per_video",
                reason: format!("must be at least the clip span {min_frames}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub videos: Vec<Video>,
    pub split: Split,
}

impl Dataset {
    pub fn video(&self, id: u64) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    fn select(&self, ids: &[u64]) -> Vec<&Video> {
        ids.iter().filter_map(|&id| self.video(id)).collect()
    }

    pub fn train_videos(&self) -> Vec<&Video> {
        self.select(&self.split.train)
    }

    pub fn test_videos(&self) -> Vec<&Video> {
        self.select(&self.split.test)
    }

    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(Video::len).sum()
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from `(seed, index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_field() {
        let spec = DatasetSpec {
            noise_level: 1.5,
            ..Default::default()
        };
        match spec.validate() {
            Err(SynthError::InvalidSpec { field, .. }) => assert_eq!(field, "noise_level"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = DatasetSpec {
            shape_kinds: vec![],
            ..Default::default()
        };
        assert!(matches!(
            spec.validate(),
            Err(SynthError::InvalidSpec {
                field: "shape_kinds",
                ..
            })
        ));
        let spec = DatasetSpec {
            frames_per_video: 10,
            ..Default::default()
        };
        assert!(matches!(
            spec.validate_for_clip(31),
            Err(SynthError::InvalidSpec {
                field: "frames_per_video",
                ..
            })
        ));
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
