//! Small convolutional encoder with an analytic backward pass.
//!
//! Each stage is a 3x3 stride-1 convolution (zero padding 1), ReLU and 2x2
//! average pooling. A global average pool and a linear projection produce the
//! embedding. The scalar type is generic so gradient checks can run in `f64`
//! while training uses `f32`.

mod checkpoint;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::synthvideo::Frame;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};

/// Allocation guards for untrusted architecture descriptors.
pub const MAX_STAGES: usize = 8;
pub const MAX_CHANNELS: usize = 1024;
pub const MAX_INPUT_EDGE: usize = 4096;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input is {actual:?}, encoder expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("parameter vector has {actual} values, architecture needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("tape/gradient mismatch: {0}")]
    TapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_h: usize,
    pub input_w: usize,
    pub stages: Vec<Stage>,
    pub dim: usize,
}

impl Architecture {
    /// Channels 8, 16, 32 and a 64-d projection.
    pub fn reference(input_h: usize, input_w: usize) -> Self {
        Self::with_channels(input_h, input_w, &[8, 16, 32], 64)
    }

    pub fn with_channels(input_h: usize, input_w: usize, channels: &[usize], dim: usize) -> Self {
        let mut stages = Vec::with_capacity(channels.len());
        let mut in_ch = 1;
        for &out_ch in channels {
            stages.push(Stage {
                in_ch,
                out_ch,
                kernel: 3,
            });
            in_ch = out_ch;
        }
        Self {
            input_h,
            input_w,
            stages,
            dim,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Architecture(m));
        if self.stages.is_empty() || self.stages.len() > MAX_STAGES {
            return bad(format!(
                "stage count {} outside 1..={MAX_STAGES}",
                self.stages.len()
            ));
        }
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h > MAX_INPUT_EDGE
            || self.input_w > MAX_INPUT_EDGE
        {
            return bad(format!(
                "input {}x{} outside 1..={MAX_INPUT_EDGE}",
                self.input_w, self.input_h
            ));
        }
        let factor = 1usize << self.stages.len();
        if !self.input_h.is_multiple_of(factor) || !self.input_w.is_multiple_of(factor) {
            return bad(format!(
                "input {}x{} not divisible by {factor} for {} pooling stages",
                self.input_w,
                self.input_h,
                self.stages.len()
            ));
        }
        let mut expected_in = 1;
        for (k, s) in self.stages.iter().enumerate() {
            if s.kernel != 3 {
                return bad(format!("stage {k} kernel {} (only 3 supported)", s.kernel));
            }
            if s.in_ch != expected_in {
                return bad(format!(
                    "stage {k} expects {} input channels, chain gives {expected_in}",
                    s.in_ch
                ));
            }
            if s.out_ch == 0 || s.out_ch > MAX_CHANNELS {
                return bad(format!(
                    "stage {k} output channels {} outside 1..={MAX_CHANNELS}",
                    s.out_ch
                ));
            }
            expected_in = s.out_ch;
        }
        if self.dim < 8 || self.dim > MAX_CHANNELS {
            return bad(format!(
                "embedding dimension {} outside 8..={MAX_CHANNELS}",
                self.dim
            ));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(1, |s| s.out_ch)
    }

    fn conv_len(s: &Stage) -> usize {
        s.out_ch * s.in_ch * s.kernel * s.kernel
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self
            .stages
            .iter()
            .map(|s| Self::conv_len(s) + s.out_ch)
            .sum();
        convs + self.dim * self.last_channels() + self.dim
    }

    /// `(weight_offset, bias_offset)` per stage, then the projection pair.
    fn offsets(&self) -> (Vec<(usize, usize)>, (usize, usize)) {
        let mut at = 0;
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = at;
            at += Self::conv_len(s);
            stages.push((w, at));
            at += s.out_ch;
        }
        let pw = at;
        (stages, (pw, pw + self.dim * self.last_channels()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub arch: Architecture,
    pub values: Vec<T>,
}

impl<T: Float> EncoderParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self, EncoderError> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            arch,
            values: vec![T::zero(); n],
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        let mut p = Self::zeros(arch)?;
        let (stage_offsets, (pw, _)) = p.arch.offsets();
        for (s, &(w, _)) in p.arch.stages.iter().zip(&stage_offsets) {
            let fan_in = (s.in_ch * s.kernel * s.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in &mut p.values[w..w + Architecture::conv_len(s)] {
                *v = T::from(normal.sample(rng)).unwrap();
            }
        }
        let fan_in = p.arch.last_channels() as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
        for v in &mut p.values[pw..pw + p.arch.dim * p.arch.last_channels()] {
            *v = T::from(normal.sample(rng)).unwrap();
        }
        Ok(p)
    }

    /// [`EncoderParams::init`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn init_seeded(arch: Architecture, seed: u64) -> Result<Self, EncoderError> {
        Self::init(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_values(arch: Architecture, values: Vec<T>) -> Result<Self, EncoderError> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(EncoderError::ParamCount {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn cast<U: Float>(&self) -> EncoderParams<U> {
        EncoderParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Activations retained per image for the backward pass.
#[derive(Debug, Clone)]
struct ImageTape<T> {
    /// Zero-padded input of each stage, `(C, H+2, W+2)`.
    padded: Vec<Vec<T>>,
    /// Post-ReLU convolution output of each stage, `(C, H, W)`.
    relu: Vec<Vec<T>>,
    pooled_last: Vec<T>,
    gap: Vec<T>,
    z: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    arch: Architecture,
    images: Vec<ImageTape<T>>,
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl<T: Float> Tape<T> {
    /// Which ReLU units were active, over all images and stages.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.images
            .iter()
            .flat_map(|im| im.relu.iter().flatten().map(|&v| v > T::zero()))
            .collect()
    }
}

fn check_input(arch: &Architecture, width: usize, height: usize) -> Result<(), EncoderError> {
    if (width, height) != (arch.input_w, arch.input_h) {
        return Err(EncoderError::ShapeMismatch {
            expected: (arch.input_w, arch.input_h),
            actual: (width, height),
        });
    }
    Ok(())
}

#[inline]
fn axpy<T: Float>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn pad<T: Float>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); ch * ph * pw];
    for c in 0..ch {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = (c * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// 3x3 convolution over a padded input, bias added, ReLU applied.
fn conv_relu<T: Float>(
    padded: &[T],
    s: &Stage,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
) -> Vec<T> {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![T::zero(); s.out_ch * h * w];
    for o in 0..s.out_ch {
        let out_plane = &mut out[o * h * w..(o + 1) * h * w];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..s.in_ch {
            let kernel = &weights[(o * s.in_ch + c) * 9..(o * s.in_ch + c + 1) * 9];
            let input = &padded[c * plane..(c + 1) * plane];
            for y in 0..h {
                let row = &mut out_plane[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let src = &input[(y + ky) * pw..(y + ky + 1) * pw];
                    for kx in 0..3 {
                        axpy(row, kernel[ky * 3 + kx], &src[kx..kx + w]);
                    }
                }
            }
        }
    }
    for v in &mut out {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

fn avg_pool<T: Float>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from(0.25).unwrap();
    let mut out = vec![T::zero(); ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            let r0 = &input[(c * h + 2 * y) * w..(c * h + 2 * y + 1) * w];
            let r1 = &input[(c * h + 2 * y + 1) * w..(c * h + 2 * y + 2) * w];
            for x in 0..ow {
                out[(c * oh + y) * ow + x] =
                    (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
    out
}

fn forward_image<T: Float>(params: &EncoderParams<T>, input: Vec<T>, keep: bool) -> ImageTape<T> {
    let arch = &params.arch;
    let (stage_offsets, (pw_off, pb_off)) = arch.offsets();
    let (mut h, mut w) = (arch.input_h, arch.input_w);
    let mut current = input;
    let mut padded_all = Vec::new();
    let mut relu_all = Vec::new();
    for (s, &(wo, bo)) in arch.stages.iter().zip(&stage_offsets) {
        let padded = pad(&current, s.in_ch, h, w);
        let weights = &params.values[wo..wo + Architecture::conv_len(s)];
        let bias = &params.values[bo..bo + s.out_ch];
        let relu = conv_relu(&padded, s, h, w, weights, bias);
        current = avg_pool(&relu, s.out_ch, h, w);
        if keep {
            padded_all.push(padded);
            relu_all.push(relu);
        }
        h /= 2;
        w /= 2;
    }
    let c_last = arch.last_channels();
    let area = T::from(h * w).unwrap();
    let gap: Vec<T> = (0..c_last)
        .map(|c| {
            current[c * h * w..(c + 1) * h * w]
                .iter()
                .fold(T::zero(), |a, &v| a + v)
                / area
        })
        .collect();
    let z: Vec<T> = (0..arch.dim)
        .map(|d| {
            params.values[pb_off + d]
                + dot(
                    &params.values[pw_off + d * c_last..pw_off + (d + 1) * c_last],
                    &gap,
                )
        })
        .collect();
    ImageTape {
        padded: padded_all,
        relu: relu_all,
        pooled_last: if keep { current } else { Vec::new() },
        gap,
        z,
    }
}

/// Unnormalized embeddings of raw `[0,1]`-scaled planes plus the tape.
pub fn forward_planes<T: Float>(
    params: &EncoderParams<T>,
    planes: &[Vec<T>],
) -> Result<(Vec<Vec<T>>, Tape<T>), EncoderError> {
    let expected = params.arch.input_h * params.arch.input_w;
    for p in planes {
        if p.len() != expected {
            return Err(EncoderError::TapeMismatch(format!(
                "input plane has {} values, expected {expected}",
                p.len()
            )));
        }
    }
    let images: Vec<ImageTape<T>> = planes
        .iter()
        .map(|p| forward_image(params, p.clone(), true))
        .collect();
    let z = images.iter().map(|t| t.z.clone()).collect();
    Ok((
        z,
        Tape {
            arch: params.arch.clone(),
            images,
        },
    ))
}

/// Unnormalized embeddings of a batch of frames plus the activation tape.
pub fn forward<T: Float>(
    params: &EncoderParams<T>,
    frames: &[Frame],
) -> Result<(Vec<Vec<T>>, Tape<T>), EncoderError> {
    for f in frames {
        check_input(&params.arch, f.width(), f.height())?;
    }
    let planes: Vec<Vec<T>> = frames.iter().map(Frame::to_unit).collect();
    forward_planes(params, &planes)
}

/// Normalized embeddings without keeping activations.
pub fn embed<T: Float>(params: &EncoderParams<T>, frame: &Frame) -> Result<Vec<T>, EncoderError> {
    check_input(&params.arch, frame.width(), frame.height())?;
    Ok(normalize(&forward_image(params, frame.to_unit(), false).z))
}

/// L2 normalization. A zero vector maps to the first basis vector.
pub fn normalize<T: Float>(z: &[T]) -> Vec<T> {
    let norm = l2_norm(z);
    if norm > T::zero() && norm.is_finite() {
        return z.iter().map(|&v| v / norm).collect();
    }
    log::warn!("normalizing a zero or non-finite embedding; substituting e1");
    let mut out = vec![T::zero(); z.len()];
    if let Some(first) = out.first_mut() {
        *first = T::one();
    }
    out
}

pub fn l2_norm<T: Float>(z: &[T]) -> T {
    dot(z, z).sqrt()
}

/// Maps a gradient w.r.t. normalized embeddings to one w.r.t. raw embeddings
/// using the Jacobian `(I - z_hat z_hat^T) / |z|`.
pub fn normalize_backward<T: Float>(z: &[T], grad_hat: &[T]) -> Vec<T> {
    let norm = l2_norm(z);
    if !(norm > T::zero()) {
        return vec![T::zero(); z.len()];
    }
    let hat: Vec<T> = z.iter().map(|&v| v / norm).collect();
    let proj = dot(&hat, grad_hat);
    hat.iter()
        .zip(grad_hat)
        .map(|(&h, &g)| (g - h * proj) / norm)
        .collect()
}

/// Gradient of `sum_i <grad_embeddings[i], e_i>` with respect to all
/// parameters, where `e_i` is the raw embedding or, with `through_normalize`,
/// its L2-normalized form.
pub fn backward<T: Float>(
    params: &EncoderParams<T>,
    tape: &Tape<T>,
    grad_embeddings: &[Vec<T>],
    through_normalize: bool,
) -> Result<Vec<T>, EncoderError> {
    let arch = &params.arch;
    if tape.arch != *arch {
        return Err(EncoderError::TapeMismatch(
            "tape was recorded with a different architecture".into(),
        ));
    }
    if grad_embeddings.len() != tape.images.len() {
        return Err(EncoderError::TapeMismatch(format!(
            "{} gradients for {} taped images",
            grad_embeddings.len(),
            tape.images.len()
        )));
    }
    let mut grad = vec![T::zero(); params.values.len()];
    for (img, g) in tape.images.iter().zip(grad_embeddings) {
        if g.len() != arch.dim {
            return Err(EncoderError::TapeMismatch(format!(
                "gradient of length {}, expected {}",
                g.len(),
                arch.dim
            )));
        }
        if img.padded.len() != arch.stages.len() {
            return Err(EncoderError::TapeMismatch(
                "tape recorded without activations".into(),
            ));
        }
        let dz = if through_normalize {
            normalize_backward(&img.z, g)
        } else {
            g.clone()
        };
        backward_image(params, img, &dz, &mut grad);
    }
    Ok(grad)
}

fn backward_image<T: Float>(
    params: &EncoderParams<T>,
    img: &ImageTape<T>,
    dz: &[T],
    grad: &mut [T],
) {
    let arch = &params.arch;
    let (stage_offsets, (pw_off, pb_off)) = arch.offsets();
    let c_last = arch.last_channels();
    let mut dgap = vec![T::zero(); c_last];
    for d in 0..arch.dim {
        grad[pb_off + d] = grad[pb_off + d] + dz[d];
        axpy(
            &mut grad[pw_off + d * c_last..pw_off + (d + 1) * c_last],
            dz[d],
            &img.gap,
        );
        axpy(
            &mut dgap,
            dz[d],
            &params.values[pw_off + d * c_last..pw_off + (d + 1) * c_last],
        );
    }
    let n = arch.stages.len();
    let (mut h, mut w) = (arch.input_h >> n, arch.input_w >> n);
    let area = T::from(h * w).unwrap();
    debug_assert_eq!(img.pooled_last.len(), c_last * h * w);
    let mut dpooled: Vec<T> = (0..c_last * h * w)
        .map(|i| dgap[i / (h * w)] / area)
        .collect();
    let quarter = T::from(0.25).unwrap();
    for k in (0..n).rev() {
        let s = &arch.stages[k];
        let (wo, bo) = stage_offsets[k];
        let (oh, ow) = (h, w);
        h *= 2;
        w *= 2;
        // pooling then ReLU
        let relu = &img.relu[k];
        let mut da = vec![T::zero(); s.out_ch * h * w];
        for c in 0..s.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let i = (c * h + y) * w + x;
                    if relu[i] > T::zero() {
                        da[i] = dpooled[(c * oh + y / 2) * ow + x / 2] * quarter;
                    }
                }
            }
        }
        let padded = &img.padded[k];
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let need_input_grad = k > 0;
        let mut dpadded = if need_input_grad {
            vec![T::zero(); s.in_ch * plane]
        } else {
            Vec::new()
        };
        for o in 0..s.out_ch {
            let da_plane = &da[o * h * w..(o + 1) * h * w];
            grad[bo + o] = grad[bo + o] + da_plane.iter().fold(T::zero(), |a, &v| a + v);
            for c in 0..s.in_ch {
                let widx = wo + (o * s.in_ch + c) * 9;
                let input = &padded[c * plane..(c + 1) * plane];
                let mut kgrad = [T::zero(); 9];
                for y in 0..h {
                    let drow = &da_plane[y * w..(y + 1) * w];
                    for ky in 0..3 {
                        let src = &input[(y + ky) * pw..(y + ky + 1) * pw];
                        for kx in 0..3 {
                            kgrad[ky * 3 + kx] = kgrad[ky * 3 + kx] + dot(drow, &src[kx..kx + w]);
                        }
                    }
                }
                for (t, &kg) in kgrad.iter().enumerate() {
                    grad[widx + t] = grad[widx + t] + kg;
                }
                if need_input_grad {
                    let dplane = &mut dpadded[c * plane..(c + 1) * plane];
                    for y in 0..h {
                        let drow = &da_plane[y * w..(y + 1) * w];
                        for ky in 0..3 {
                            let dst = &mut dplane[(y + ky) * pw..(y + ky + 1) * pw];
                            for kx in 0..3 {
                                axpy(
                                    &mut dst[kx..kx + w],
                                    params.values[widx + ky * 3 + kx],
                                    drow,
                                );
                            }
                        }
                    }
                }
            }
        }
        if need_input_grad {
            // strip padding: gradient w.r.t. the previous stage's pooled output
            dpooled = vec![T::zero(); s.in_ch * h * w];
            for c in 0..s.in_ch {
                for y in 0..h {
                    let src = (c * (h + 2) + y + 1) * pw + 1;
                    dpooled[(c * h + y) * w..(c * h + y + 1) * w]
                        .copy_from_slice(&dpadded[src..src + w]);
                }
            }
        }
    }
}

/// SHA-256 of the serialized checkpoint.
pub fn fingerprint(params: &EncoderParams<f32>) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(encode_checkpoint(params)).into()
}
