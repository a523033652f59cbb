use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{mix_seed, Dataset, DatasetSpec, Frame, Mask, ShapeKind, Split, SynthError, Video};

const TEXTURE_CELL: f64 = 8.0;
const TEXTURE_AMPLITUDE: f64 = 14.0;
const VIDEO_OFFSET: f64 = 8.0;
const SHAPE_JITTER: f64 = 4.0;
const SENSOR_SIGMA: f64 = 30.0;
const PLACEMENT_ATTEMPTS: usize = 64;

/// One shape's appearance and trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    pub class: u8,
    pub kind: ShapeKind,
    /// Half extents along x and y; equal for circles.
    pub half_w: f64,
    pub half_h: f64,
    pub intensity: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub amplitude: (f64, f64),
    pub omega: f64,
    pub phase: f64,
    /// First frame on which the shape is visible.
    pub entry_frame: usize,
    bounds_x: (f64, f64),
    bounds_y: (f64, f64),
}

impl ShapePlan {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let wave = (self.omega * t + self.phase).sin() - self.phase.sin();
        let x = self.start.0 + self.velocity.0 * t + self.amplitude.0 * wave;
        let y = self.start.1 + self.velocity.1 * t + self.amplitude.1 * wave;
        (reflect(x, self.bounds_x), reflect(y, self.bounds_y))
    }

    pub fn visible(&self, t: usize) -> bool {
        t >= self.entry_frame
    }

    /// Radius of a circle enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Circle => self.half_w,
            ShapeKind::Ellipse => self.half_w.max(self.half_h),
            ShapeKind::Rectangle => self.half_w.hypot(self.half_h),
        }
    }

    /// Whether the pixel centred at `(px, py)` lies inside the shape at time `t`.
    pub fn contains(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center(t);
        self.contains_at(cx, cy, px, py)
    }

    fn contains_at(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.half_w * self.half_w,
            ShapeKind::Ellipse => {
                let u = dx / self.half_w;
                let v = dy / self.half_h;
                u * u + v * v <= 1.0
            }
            ShapeKind::Rectangle => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
        }
    }
}

/// Everything needed to render one video deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    pub id: u64,
    pub size: usize,
    pub frames: usize,
    pub background: Vec<f64>,
    pub shapes: Vec<ShapePlan>,
    pub noise_sigma: f64,
    noise_seed: u64,
}

impl VideoPlan {
    pub fn render(&self, t: usize) -> (Frame, Mask) {
        let n = self.size;
        let mut canvas = self.background.clone();
        let mut labels = vec![0u8; n * n];
        // ascending class order: higher classes paint over lower ones
        for shape in &self.shapes {
            if !shape.visible(t) {
                continue;
            }
            let (cx, cy) = shape.center(t);
            let r = shape.bounding_radius();
            let x0 = ((cx - r).floor().max(0.0)) as usize;
            let y0 = ((cy - r).floor().max(0.0)) as usize;
            let x1 = ((cx + r).ceil() as usize).min(n - 1);
            let y1 = ((cy + r).ceil() as usize).min(n - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if shape.contains_at(cx, cy, x as f64 + 0.5, y as f64 + 0.5) {
                        canvas[y * n + x] = shape.intensity;
                        labels[y * n + x] = shape.class;
                    }
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.noise_seed, t as u64));
            for v in canvas.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.noise_sigma * z;
            }
        }
        let pixels = canvas
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        (
            Frame::new(n, n, pixels).expect("validated size"),
            Mask::new(n, n, labels).expect("validated size"),
        )
    }

    pub fn render_video(&self) -> Video {
        let (frames, masks): (Vec<_>, Vec<_>) = (0..self.frames).map(|t| self.render(t)).unzip();
        Video {
            id: self.id,
            frames,
            masks: Some(masks),
        }
    }
}

fn reflect(x: f64, (lo, hi): (f64, f64)) -> f64 {
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let y = (x - lo).rem_euclid(2.0 * width);
    lo + if y > width { 2.0 * width - y } else { y }
}

fn is_late(index: usize, fraction: f64) -> bool {
    ((index + 1) as f64 * fraction).floor() > (index as f64 * fraction).floor()
}

fn class_intensity(class: u8, num_classes: u8) -> f64 {
    if num_classes <= 1 {
        190.0
    } else {
        140.0 + 90.0 * f64::from(class - 1) / f64::from(num_classes - 1)
    }
}

fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = (size as f64 / TEXTURE_CELL).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..cells * cells)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / TEXTURE_CELL;
        let iy = gy.floor() as usize;
        let fy = smooth(gy - iy as f64);
        for x in 0..size {
            let gx = x as f64 / TEXTURE_CELL;
            let ix = gx.floor() as usize;
            let fx = smooth(gx - ix as f64);
            let at = |i: usize, j: usize| lattice[j * cells + i];
            let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
            let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
            out[y * size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn overlaps(a: &ShapePlan, b: &ShapePlan, frames: usize) -> bool {
    let gap = a.bounding_radius() + b.bounding_radius() + 1.0;
    (0..frames)
        .filter(|&t| a.visible(t) && b.visible(t))
        .any(|t| {
            let (ax, ay) = a.center(t);
            let (bx, by) = b.center(t);
            (ax - bx).hypot(ay - by) < gap
        })
}

/// Draws the layout of video `index`; pure function of `(spec, index)`.
pub fn plan_video(spec: &DatasetSpec, index: usize) -> VideoPlan {
    let video_seed = mix_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let n = spec.image_size;
    let size = n as f64;
    let frames = spec.frames_per_video;

    let offset = rng.random_range(-VIDEO_OFFSET..=VIDEO_OFFSET);
    let base = rng.random_range(40.0..=65.0);
    let grad_amp = rng.random_range(20.0..=40.0);
    let grad_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let texture = value_noise(n, &mut rng);
    let (gc, gs) = (grad_dir.cos(), grad_dir.sin());
    let background = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            let ramp = ((x - size / 2.0) * gc + (y - size / 2.0) * gs) / size + 0.5;
            base + grad_amp * ramp + TEXTURE_AMPLITUDE * texture[i] + offset
        })
        .collect();

    let late = is_late(index, spec.late_entry_fraction) && frames > 1;
    let mut classes: Vec<u8> = (1..=spec.num_classes).collect();
    classes.shuffle(&mut rng);
    let count = rng.random_range(1..=classes.len());
    let mut chosen = classes[..count].to_vec();
    chosen.sort_unstable();

    let speed = spec.motion_speed;
    let mut shapes: Vec<ShapePlan> = Vec::with_capacity(chosen.len());
    for &class in &chosen {
        let kind = *spec
            .shape_kinds
            .choose(&mut rng)
            .expect("validated non-empty");
        let r = rng.random_range(0.08 * size..=0.15 * size);
        let (half_w, half_h) = match kind {
            ShapeKind::Circle => (r, r),
            ShapeKind::Rectangle => (
                r * rng.random_range(0.7..=1.2),
                r * rng.random_range(0.7..=1.2),
            ),
            ShapeKind::Ellipse => (
                r * rng.random_range(0.6..=1.3),
                r * rng.random_range(0.6..=1.3),
            ),
        };
        let intensity = class_intensity(class, spec.num_classes)
            + offset
            + rng.random_range(-SHAPE_JITTER..=SHAPE_JITTER);
        let entry_frame = if late {
            rng.random_range(frames / 5..=frames / 2).max(1)
        } else {
            0
        };
        let bounds_x = (half_w + 1.0, size - 1.0 - half_w);
        let bounds_y = (half_h + 1.0, size - 1.0 - half_h);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let start = (
                rng.random_range(bounds_x.0..=bounds_x.1.max(bounds_x.0)),
                rng.random_range(bounds_y.0..=bounds_y.1.max(bounds_y.0)),
            );
            let linear = speed * rng.random_range(0.6..=0.9);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let omega = std::f64::consts::TAU / rng.random_range(18.0..=36.0);
            let amp = (speed - linear) / omega;
            let amp_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let candidate = ShapePlan {
                class,
                kind,
                half_w,
                half_h,
                intensity,
                start,
                velocity: (linear * dir.cos(), linear * dir.sin()),
                amplitude: (amp * amp_dir.cos(), amp * amp_dir.sin()),
                omega,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                entry_frame,
                bounds_x,
                bounds_y,
            };
            if shapes.iter().all(|s| !overlaps(s, &candidate, frames)) {
                placed = Some(candidate);
                break;
            }
        }
        if let Some(shape) = placed {
            shapes.push(shape);
        }
    }

    VideoPlan {
        id: index as u64,
        size: n,
        frames,
        background,
        shapes,
        noise_sigma: SENSOR_SIGMA * spec.noise_level,
        noise_seed: mix_seed(video_seed, u64::MAX),
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let videos: Vec<Video> = (0..spec.num_videos)
        .map(|i| plan_video(spec, i).render_video())
        .collect();
    let mut ids: Vec<u64> = videos.iter().map(|v| v.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
    ids.shuffle(&mut rng);
    let n_test = ((spec.num_videos as f64) * 0.2).round() as usize;
    let n_test = n_test.min(spec.num_videos.saturating_sub(1));
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Dataset {
        spec: spec.clone(),
        videos,
        split: Split { train, test },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_videos: 5,
            frames_per_video: 20,
            image_size: 48,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec {
            seed: 12,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.videos, c.videos);
    }

    #[test]
    fn circle_area_matches_pixel_centre_count() {
        for seed in 0..10 {
            let spec = DatasetSpec {
                num_videos: 1,
                frames_per_video: 12,
                num_classes: 1,
                shape_kinds: vec![ShapeKind::Circle],
                noise_level: 0.0,
                seed,
                ..Default::default()
            };
            let plan = plan_video(&spec, 0);
            let r = plan.shapes[0].half_w;
            let video = plan.render_video();
            for (t, mask) in video.masks.unwrap().iter().enumerate() {
                // oracle: count pixel centres inside the circle directly
                let (cx, cy) = plan.shapes[0].center(t);
                let mut oracle = 0usize;
                for y in 0..spec.image_size {
                    for x in 0..spec.image_size {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            oracle += 1;
                        }
                    }
                }
                let count = mask.count(1);
                assert_eq!(count, oracle);
                let area = std::f64::consts::PI * r * r;
                assert!(
                    (count as f64 - area).abs() <= 4.0 * r,
                    "count {count} area {area}"
                );
            }
        }
    }

    #[test]
    fn static_scene_is_constant() {
        let spec = DatasetSpec {
            num_videos: 2,
            frames_per_video: 8,
            num_classes: 1,
            motion_speed: 0.0,
            noise_level: 0.0,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        for v in &ds.videos {
            assert!(v.frames.windows(2).all(|w| w[0] == w[1]));
            let masks = v.masks.as_ref().unwrap();
            assert!(masks.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn centroid_moves_at_most_speed_plus_two() {
        let spec = DatasetSpec {
            num_videos: 12,
            frames_per_video: 40,
            seed: 3,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        for v in &ds.videos {
            let masks = v.masks.as_ref().unwrap();
            for w in masks.windows(2) {
                for c in 1..=spec.num_classes {
                    if let (Some(a), Some(b)) = (w[0].centroid(c), w[1].centroid(c)) {
                        let d = (a.0 - b.0).hypot(a.1 - b.1);
                        assert!(
                            d <= spec.motion_speed + 2.0,
                            "video {} class {c} moved {d}",
                            v.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn late_entry_videos_start_empty() {
        let spec = DatasetSpec {
            num_videos: 4,
            late_entry_fraction: 0.5,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let late: Vec<bool> = ds
            .videos
            .iter()
            .map(|v| !v.masks.as_ref().unwrap()[0].has_foreground())
            .collect();
        assert_eq!(late, vec![false, true, false, true]);
        for v in &ds.videos {
            assert!(v.masks.as_ref().unwrap().iter().any(Mask::has_foreground));
        }
    }

    #[test]
    fn split_is_eighty_twenty() {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(ds.split.train.len(), 16);
        assert_eq!(ds.split.test.len(), 4);
        let mut all: Vec<u64> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<u64>>());
    }
}
