//! Training-free memory-bank propagator.
//!
//! Frames are cut into a `grid x grid` patch lattice. A patch feature is a
//! 4x4 sub-sample of its intensities divided by `intensity_scale`, followed
//! by a 2-D sinusoidal position code. Patch similarity is the negative mean
//! squared feature distance. Each query patch attends to its `top_k` most
//! similar memory patches (softmax at `temperature`) and
//! copies their per-pixel label distributions at the same in-patch offsets.
//! Each copied pixel is further weighted by a Gaussian affinity between its
//! intensity and the query pixel's, which keeps object boundaries sharp. A
//! fixed share of the attention mass votes for background, so pixels that no
//! matched memory pixel resembles fall back to background.

use serde::{Deserialize, Serialize};

use super::{validate_prefix, MaskPrediction, VosError, VosModel, VosPrompt};
use crate::synthvideo::{Frame, Mask};

const SUBSAMPLE: usize = 4;
const INTENSITY_DIMS: usize = SUBSAMPLE * SUBSAMPLE;
const POSITION_FREQS: [f32; 2] = [1.0, 4.0];
const FEATURE_DIMS: usize = INTENSITY_DIMS + 4 * POSITION_FREQS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagatorConfig {
    pub grid: usize,
    pub temperature: f32,
    pub top_k: usize,
    /// Every n-th predicted frame is written to memory.
    pub memory_every: usize,
    /// Maximum number of predicted frames held; prompts are always kept.
    pub memory_capacity: usize,
    pub position_weight: f32,
    /// Gray levels per unit of feature distance.
    pub intensity_scale: f32,
    /// Width of the per-pixel intensity affinity, gray levels; 0 disables it.
    pub pixel_sigma: f32,
    /// Background vote as a fraction of the attention mass.
    pub background_prior: f32,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            temperature: 0.25,
            top_k: 5,
            memory_every: 4,
            memory_capacity: 32,
            position_weight: 0.5,
            intensity_scale: 32.0,
            pixel_sigma: 20.0,
            background_prior: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferencePropagator {
    pub config: PropagatorConfig,
}

struct Lattice {
    width: usize,
    height: usize,
    xs: Vec<usize>,
    ys: Vec<usize>,
}

impl Lattice {
    fn new(width: usize, height: usize, grid: usize) -> Self {
        Self {
            width,
            height,
            xs: (0..=grid).map(|k| k * width / grid).collect(),
            ys: (0..=grid).map(|k| k * height / grid).collect(),
        }
    }

    fn grid(&self) -> usize {
        self.xs.len() - 1
    }
}

struct MemoryFrame {
    pixels: Vec<u8>,
    features: Vec<[f32; FEATURE_DIMS]>,
    /// Per-pixel label distribution, `classes` values per pixel.
    labels: Vec<f32>,
    permanent: bool,
}

impl ReferencePropagator {
    pub fn new(config: PropagatorConfig) -> Self {
        Self { config }
    }

    fn features(&self, frame: &Frame, lat: &Lattice) -> Vec<[f32; FEATURE_DIMS]> {
        let g = lat.grid();
        let mut out = Vec::with_capacity(g * g);
        for py in 0..g {
            for px in 0..g {
                let (x0, x1, y0, y1) = (lat.xs[px], lat.xs[px + 1], lat.ys[py], lat.ys[py + 1]);
                let mut f = [0.0f32; FEATURE_DIMS];
                for sy in 0..SUBSAMPLE {
                    let y = y0 + (2 * sy + 1) * (y1 - y0) / (2 * SUBSAMPLE);
                    for sx in 0..SUBSAMPLE {
                        let x = x0 + (2 * sx + 1) * (x1 - x0) / (2 * SUBSAMPLE);
                        let v = f32::from(frame.get(x, y))
                            / self.config.intensity_scale.max(f32::EPSILON);
                        f[sy * SUBSAMPLE + sx] = v / SUBSAMPLE as f32;
                    }
                }
                let cx = (px as f32 + 0.5) / g as f32;
                let cy = (py as f32 + 0.5) / g as f32;
                let scale = self.config.position_weight;
                for (k, &freq) in POSITION_FREQS.iter().enumerate() {
                    let (sx, cxv) = (std::f32::consts::PI * freq * cx).sin_cos();
                    let (sy, cyv) = (std::f32::consts::PI * freq * cy).sin_cos();
                    let base = INTENSITY_DIMS + 4 * k;
                    f[base] = cxv * scale;
                    f[base + 1] = sx * scale;
                    f[base + 2] = cyv * scale;
                    f[base + 3] = sy * scale;
                }
                out.push(f);
            }
        }
        out
    }

    fn predict(
        &self,
        frame: &Frame,
        features: &[[f32; FEATURE_DIMS]],
        memory: &[MemoryFrame],
        lat: &Lattice,
        classes: usize,
    ) -> (Vec<f32>, Vec<u8>, Vec<f32>) {
        let g = lat.grid();
        let k = self.config.top_k.max(1);
        let (w, h) = (lat.width, lat.height);
        let mut probs = vec![0.0f32; w * h * classes];
        let mut best: Vec<(f32, usize, usize)> = Vec::with_capacity(k + 1);
        let mut acc = vec![0.0f32; classes];
        let affinity = |a: u8, b: u8| {
            if self.config.pixel_sigma > 0.0 {
                let d = (f32::from(a) - f32::from(b)) / self.config.pixel_sigma;
                (-0.5 * d * d).exp()
            } else {
                1.0
            }
        };
        for (q, fq) in features.iter().enumerate() {
            best.clear();
            for (mi, m) in memory.iter().enumerate() {
                for (pi, fm) in m.features.iter().enumerate() {
                    let s: f32 = -fq
                        .iter()
                        .zip(fm)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f32>();
                    if best.len() < k || s > best[best.len() - 1].0 {
                        let at = best.partition_point(|b| b.0 >= s);
                        best.insert(at, (s, mi, pi));
                        best.truncate(k);
                    }
                }
            }
            let top = best[0].0;
            let weights: Vec<f32> = best
                .iter()
                .map(|b| ((b.0 - top) / self.config.temperature).exp())
                .collect();
            let total: f32 = weights.iter().sum();
            let (qx, qy) = (q % g, q / g);
            for y in lat.ys[qy]..lat.ys[qy + 1] {
                for x in lat.xs[qx]..lat.xs[qx + 1] {
                    let (dx, dy) = (x - lat.xs[qx], y - lat.ys[qy]);
                    let qv = frame.get(x, y);
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    let dst = &mut probs[(y * w + x) * classes..(y * w + x + 1) * classes];
                    let mut mass = 0.0f32;
                    for (&(_, mi, pi), &wt) in best.iter().zip(&weights) {
                        let (mx, my) = (pi % g, pi / g);
                        let sx = (lat.xs[mx] + dx).min(lat.xs[mx + 1] - 1);
                        let sy = (lat.ys[my] + dy).min(lat.ys[my + 1] - 1);
                        let m = &memory[mi];
                        let src = &m.labels[(sy * w + sx) * classes..(sy * w + sx + 1) * classes];
                        let a = wt / total;
                        let r = a * affinity(qv, m.pixels[sy * w + sx]);
                        mass += r;
                        for ((d, e), &s) in dst.iter_mut().zip(acc.iter_mut()).zip(src) {
                            *d += a * s;
                            *e += r * s;
                        }
                    }
                    let prior = self.config.background_prior.max(0.0);
                    acc[0] += prior;
                    mass += prior;
                    if mass > 1e-6 {
                        for (d, &e) in dst.iter_mut().zip(&acc) {
                            *d = e / mass;
                        }
                    }
                }
            }
        }
        let mut labels = Vec::with_capacity(w * h);
        let mut confidence = Vec::with_capacity(w * h);
        for p in probs.chunks_exact(classes) {
            let (arg, top) =
                p.iter()
                    .enumerate()
                    .fold((0usize, f32::NEG_INFINITY), |acc, (c, &v)| {
                        if v > acc.1 {
                            (c, v)
                        } else {
                            acc
                        }
                    });
            labels.push(arg as u8);
            confidence.push(top.clamp(0.0, 1.0));
        }
        (probs, labels, confidence)
    }
}

fn one_hot(mask: &Mask, classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; mask.labels().len() * classes];
    for (i, &l) in mask.labels().iter().enumerate() {
        out[i * classes + l as usize] = 1.0;
    }
    out
}

impl VosModel for ReferencePropagator {
    fn segment_sequence(
        &self,
        frames: &[Frame],
        prompts: &[VosPrompt],
    ) -> Result<Vec<MaskPrediction>, VosError> {
        validate_prefix(frames, prompts)?;
        let (w, h) = frames[0].dims();
        let lat = Lattice::new(w, h, self.config.grid.clamp(1, w.min(h)));
        let max_label = prompts
            .iter()
            .map(|p| p.mask.max_label())
            .max()
            .unwrap_or(0);
        let classes = max_label as usize + 1;
        let prompt_foreground = max_label > 0;
        let mut memory: Vec<MemoryFrame> = prompts
            .iter()
            .map(|p| MemoryFrame {
                pixels: frames[p.frame_index].pixels().to_vec(),
                features: self.features(&frames[p.frame_index], &lat),
                labels: one_hot(&p.mask, classes),
                permanent: true,
            })
            .collect();
        let mut out = Vec::with_capacity(frames.len() - prompts.len());
        for (n, t) in (prompts.len()..frames.len()).enumerate() {
            let features = self.features(&frames[t], &lat);
            let (probs, labels, pixel_conf) =
                self.predict(&frames[t], &features, &memory, &lat, classes);
            let fg: Vec<f32> = labels
                .iter()
                .zip(&pixel_conf)
                .filter(|(&l, _)| l != 0)
                .map(|(_, &c)| c)
                .collect();
            let confidence = if fg.is_empty() {
                if prompt_foreground {
                    0.0
                } else {
                    1.0
                }
            } else {
                (fg.iter().map(|&c| f64::from(c)).sum::<f64>() / fg.len() as f64) as f32
            };
            out.push(MaskPrediction {
                frame_index: t,
                mask: Mask::new(w, h, labels).expect("dimensions from frames"),
                confidence: confidence.clamp(0.0, 1.0),
                pixel_confidence: Some(pixel_conf),
            });
            if self.config.memory_every > 0
                && (n + 1) % self.config.memory_every == 0
                && self.config.memory_capacity > 0
            {
                memory.push(MemoryFrame {
                    pixels: frames[t].pixels().to_vec(),
                    features,
                    labels: probs,
                    permanent: false,
                });
                if memory.iter().filter(|m| !m.permanent).count() > self.config.memory_capacity {
                    let oldest = memory
                        .iter()
                        .position(|m| !m.permanent)
                        .expect("non-permanent entry");
                    memory.remove(oldest);
                }
            }
        }
        Ok(out)
    }
}
