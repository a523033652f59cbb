//! Class-colored mask overlays as binary PPM.

use std::path::Path;

use super::EvalError;
use crate::synthvideo::{Frame, Mask};

/// Colors for classes 1, 2, ...; classes past the end wrap around.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// RGB pixels: grayscale where the mask is background, otherwise the
/// rounded mean of gray and the class color.
pub fn overlay_rgb(frame: &Frame, mask: &Mask) -> Result<Vec<u8>, EvalError> {
    if frame.dims() != mask.dims() {
        return Err(EvalError::Dimension {
            pred: mask.dims(),
            truth: frame.dims(),
        });
    }
    let mut out = Vec::with_capacity(frame.pixels().len() * 3);
    for (&g, &l) in frame.pixels().iter().zip(mask.labels()) {
        if l == 0 {
            out.extend_from_slice(&[g, g, g]);
        } else {
            let color = PALETTE[(l as usize - 1) % PALETTE.len()];
            out.extend(
                color
                    .iter()
                    .map(|&c| (u16::from(g) + u16::from(c)).div_ceil(2) as u8),
            );
        }
    }
    Ok(out)
}

pub fn encode_overlay(frame: &Frame, mask: &Mask) -> Result<Vec<u8>, EvalError> {
    let rgb = overlay_rgb(frame, mask)?;
    let (w, h) = frame.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn write_overlay(frame: &Frame, mask: &Mask, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, encode_overlay(frame, mask)?).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
