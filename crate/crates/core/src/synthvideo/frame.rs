use serde::{Deserialize, Serialize};

use super::SynthError;

/// Smallest accepted frame edge, in pixels.
pub const MIN_FRAME_EDGE: usize = 16;

/// Single-channel 8-bit image stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, SynthError> {
        if width < MIN_FRAME_EDGE || height < MIN_FRAME_EDGE {
            return Err(SynthError::FrameTooSmall { width, height });
        }
        if pixels.len() != width * height {
            return Err(SynthError::PixelCount {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, SynthError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Intensities scaled to `[0, 1]`, the encoder's input convention.
    pub fn to_unit<T: num_traits::Float>(&self) -> Vec<T> {
        let scale = T::from(1.0 / 255.0).unwrap();
        self.pixels
            .iter()
            .map(|&p| T::from(p).unwrap() * scale)
            .collect()
    }
}

/// Integer label map; 0 is background and `1..=C` are classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, SynthError> {
        if width < MIN_FRAME_EDGE || height < MIN_FRAME_EDGE {
            return Err(SynthError::FrameTooSmall { width, height });
        }
        if labels.len() != width * height {
            return Err(SynthError::PixelCount {
                expected: width * height,
                actual: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, SynthError> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Sorted distinct non-zero labels.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Binary mask with `class` mapped to 1 and everything else to 0.
    pub fn binary(&self, class: u8) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| u8::from(l == class)).collect(),
        }
    }

    /// Centroid `(x, y)` of the pixels carrying `class`, if any.
    pub fn centroid(&self, class: u8) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == class {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Ordered frames with optional aligned ground-truth masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    pub id: u64,
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<Mask>>,
}

impl Video {
    pub fn new(id: u64, frames: Vec<Frame>, masks: Option<Vec<Mask>>) -> Result<Self, SynthError> {
        let video = Self { id, frames, masks };
        video.validate()?;
        Ok(video)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        self.masks.is_some()
    }

    pub fn mask(&self, t: usize) -> Option<&Mask> {
        self.masks.as_ref().and_then(|m| m.get(t))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames.is_empty() {
            return Err(SynthError::EmptyVideo(self.id));
        }
        let dims = self.frames[0].dims();
        for f in &self.frames {
            if f.dims() != dims {
                return Err(SynthError::DimensionMismatch {
                    what: format!("video {} frame", self.id),
                    expected: dims,
                    actual: f.dims(),
                });
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.frames.len() {
                return Err(SynthError::MaskCount {
                    video: self.id,
                    frames: self.frames.len(),
                    masks: masks.len(),
                });
            }
            for m in masks {
                if m.dims() != dims {
                    return Err(SynthError::DimensionMismatch {
                        what: format!("video {} mask", self.id),
                        expected: dims,
                        actual: m.dims(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Train/test partition by video id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}
