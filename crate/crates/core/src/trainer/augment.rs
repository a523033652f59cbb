//! Two-view augmentation: rotation, horizontal flip, translation, Gaussian blur.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::sampler::ViewAugmenter;
use crate::synthvideo::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationParams {
    pub rotation: bool,
    /// Maximum absolute rotation, degrees.
    pub rotation_deg: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub blur: bool,
    pub blur_sigma: (f64, f64),
    pub translation: bool,
    /// Maximum absolute shift per axis, pixels.
    pub translate_px: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            rotation: true,
            rotation_deg: 10.0,
            flip: true,
            flip_prob: 0.5,
            blur: true,
            blur_sigma: (0.0, 1.0),
            translation: true,
            translate_px: 4.0,
        }
    }
}

impl AugmentationParams {
    pub fn disabled() -> Self {
        Self {
            rotation: false,
            flip: false,
            blur: false,
            translation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.rotation_deg)
            || !ok(self.translate_px)
            || !ok(self.blur_sigma.0)
            || !ok(self.blur_sigma.1)
        {
            return Err("augmentation ranges must be finite and non-negative".into());
        }
        if self.blur_sigma.0 > self.blur_sigma.1 {
            return Err("blur_sigma range is inverted".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err("flip_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// One draw shared by every frame of a view.
    pub fn sample(&self, rng: &mut (impl Rng + ?Sized)) -> ViewTransform {
        let mut t = ViewTransform::identity();
        if self.rotation && self.rotation_deg > 0.0 {
            t.angle_deg = rng.random_range(-self.rotation_deg..=self.rotation_deg);
        }
        if self.flip {
            t.flip = rng.random::<f64>() < self.flip_prob;
        }
        if self.translation && self.translate_px > 0.0 {
            t.shift = (
                rng.random_range(-self.translate_px..=self.translate_px),
                rng.random_range(-self.translate_px..=self.translate_px),
            );
        }
        if self.blur && self.blur_sigma.1 > 0.0 {
            t.sigma = rng.random_range(self.blur_sigma.0..=self.blur_sigma.1);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub angle_deg: f64,
    pub flip: bool,
    pub shift: (f64, f64),
    pub sigma: f64,
}

impl ViewTransform {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            flip: false,
            shift: (0.0, 0.0),
            sigma: 0.0,
        }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let mut out = frame.clone();
        if self.angle_deg != 0.0 || self.shift != (0.0, 0.0) {
            out = warp(&out, self.angle_deg.to_radians(), self.shift);
        }
        if self.flip {
            out = flip_horizontal(&out);
        }
        if self.sigma > 0.0 {
            out = gaussian_blur(&out, self.sigma);
        }
        out
    }
}

pub fn flip_horizontal(frame: &Frame) -> Frame {
    let (w, h) = frame.dims();
    let mut px = frame.pixels().to_vec();
    for row in px.chunks_exact_mut(w) {
        row.reverse();
    }
    Frame::new(w, h, px).expect("same dimensions")
}

/// Rotation about the image centre followed by a shift; bilinear sampling
/// with edge clamping.
fn warp(frame: &Frame, angle: f64, shift: (f64, f64)) -> Frame {
    let (w, h) = frame.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let src = frame.pixels();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        f64::from(src[y * w + x])
    };
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // inverse map: undo the shift, then rotate by -angle
            let dx = x as f64 - shift.0 - cx;
            let dy = y as f64 - shift.1 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            px.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame::new(w, h, px).expect("same dimensions")
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    let (w, h) = frame.dims();
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let src: Vec<f64> = frame.pixels().iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| {
                    kv * src
                        [y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize]
                })
                .sum();
        }
    }
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| {
                    kv * tmp
                        [(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x]
                })
                .sum();
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame::new(w, h, px).expect("same dimensions")
}

impl ViewAugmenter for AugmentationParams {
    fn augment_view(&self, frames: &[Frame], rng: &mut dyn RngCore) -> Vec<Frame> {
        let t = self.sample(rng);
        frames.iter().map(|f| t.apply(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Frame {
        Frame::new(
            32,
            24,
            (0..32 * 24).map(|i| ((i * 37) % 251) as u8).collect(),
        )
        .unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let f = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = AugmentationParams::disabled().augment_view(&[f.clone(), f.clone()], &mut rng);
        assert_eq!(out, vec![f.clone(), f]);
    }

    #[test]
    fn flip_is_an_involution() {
        let f = ramp();
        let t = ViewTransform {
            flip: true,
            ..ViewTransform::identity()
        };
        assert_eq!(t.apply(&t.apply(&f)), f);
        assert_ne!(t.apply(&f), f);
    }

    #[test]
    fn blur_preserves_interior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Frame::new(
            48,
            48,
            (0..48 * 48).map(|_| rng.random_range(60..200)).collect(),
        )
        .unwrap();
        let b = gaussian_blur(&f, 1.0);
        // direct 2-D convolution oracle on the interior
        let k = gaussian_kernel(1.0);
        let r = k.len() / 2;
        let (mut ours, mut oracle, mut orig) = (0.0, 0.0, 0.0);
        for y in 8..40 {
            for x in 8..40 {
                let mut acc = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        acc += ky * kx * f64::from(f.get(x + dx - r, y + dy - r));
                    }
                }
                oracle += acc;
                ours += f64::from(b.get(x, y));
                orig += f64::from(f.get(x, y));
            }
        }
        assert!((ours - oracle).abs() / oracle < 1e-3);
        assert!((ours - orig).abs() / orig < 0.01);
    }

    #[test]
    fn shared_draw_across_view() {
        let f = ramp();
        let g = flip_horizontal(&ramp());
        let p = AugmentationParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = p.augment_view(&[f.clone(), g.clone()], &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = p.sample(&mut rng);
        assert_eq!(out, vec![t.apply(&f), t.apply(&g)]);
        assert!(out.iter().all(|o| o.dims() == f.dims()));
    }

    #[test]
    fn zero_rotation_integer_shift_moves_pixels() {
        let f = ramp();
        let t = ViewTransform {
            shift: (2.0, 1.0),
            ..ViewTransform::identity()
        };
        let out = t.apply(&f);
        assert_eq!(out.get(10, 10), f.get(8, 9));
    }
}
