//! Procedurally rendered shape images.
//!
//! The label is the shape type, which mirroring or flipping never changes,
//! so flip augmentations are label-preserving by construction.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cifar::quantize, Dataset, ImageSample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Disk => "disk",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Ring => "ring",
            Self::Cross => "cross",
            Self::Bar => "bar",
        }
    }

    /// Membership test in shape-local coordinates scaled so the shape fits
    /// the unit circle.
    fn contains(&self, u: f64, v: f64) -> bool {
        const ARM: f64 = 0.22;
        const LEN: f64 = 0.97;
        match self {
            Self::Disk => u * u + v * v <= 1.0,
            Self::Square => u.abs().max(v.abs()) <= std::f64::consts::FRAC_1_SQRT_2,
            Self::Triangle => {
                // Circumradius 1, apothem 1/2; outward edge normals at 270, 30, 150 degrees.
                [270.0f64, 30.0, 150.0].iter().all(|deg| {
                    let a = deg.to_radians();
                    u * a.cos() + v * a.sin() <= 0.5
                })
            }
            Self::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            Self::Cross => {
                (u.abs() <= ARM && v.abs() <= LEN) || (v.abs() <= ARM && u.abs() <= LEN)
            }
            Self::Bar => u.abs() <= LEN && v.abs() <= ARM,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "disk" => Self::Disk,
            "square" => Self::Square,
            "triangle" => Self::Triangle,
            "ring" => Self::Ring,
            "cross" => Self::Cross,
            "bar" => Self::Bar,
            _ => return Err(Error::Invalid(format!("unknown shape `{s}`"))),
        })
    }
}

/// Per-sample randomization ranges. Fractions are of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Bounding radius of the shape.
    pub radius: (f64, f64),
    /// Foreground minus background intensity, applied with a random sign.
    pub contrast: (f64, f64),
    /// Background base intensity.
    pub background: (f64, f64),
    /// Per-channel tint spread around the base intensity.
    pub tint: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            radius: (0.12, 0.3),
            contrast: (0.15, 0.5),
            background: (0.2, 0.8),
            tint: 0.1,
            noise: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shapes: Vec<ShapeKind>,
    pub channels: usize,
    pub size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub jitter: Jitter,
}

/// Redraws allowed per sample before a placement failure becomes an error.
const MAX_PLACEMENT_TRIES: usize = 64;
/// Subsamples per pixel side for anti-aliased coverage.
const SUPERSAMPLE: usize = 4;

impl SyntheticSpec {
    /// Disk, square, triangle on 3x32x32.
    pub fn base_task(samples_per_class: usize, seed: u64) -> Self {
        Self {
            shapes: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle],
            channels: 3,
            size: 32,
            samples_per_class,
            seed,
            jitter: Jitter::default(),
        }
    }

    /// Ring, cross, bar on 3x32x32.
    pub fn target_task(samples_per_class: usize, seed: u64) -> Self {
        Self {
            shapes: vec![ShapeKind::Ring, ShapeKind::Cross, ShapeKind::Bar],
            ..Self::base_task(samples_per_class, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.jitter;
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.shapes.is_empty() || self.channels == 0 || self.size == 0 {
            return Err(Error::Invalid("synthetic spec needs shapes, channels and a size".into()));
        }
        if !(ordered(j.radius) && ordered(j.contrast) && ordered(j.background)) || j.radius.0 <= 0.0 {
            return Err(Error::Invalid(format!("invalid jitter ranges {j:?}")));
        }
        if !(j.noise >= 0.0 && j.tint >= 0.0) {
            return Err(Error::Invalid("noise and tint must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn render(spec: &SyntheticSpec, shape: ShapeKind, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let j = &spec.jitter;
    let side = spec.size as f64;
    let mut placement = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let r = uniform(rng, j.radius) * side;
        let cx = rng.gen_range(0.0..side);
        let cy = rng.gen_range(0.0..side);
        if cx - r >= 0.0 && cx + r <= side && cy - r >= 0.0 && cy + r <= side {
            placement = Some((r, cx, cy));
            break;
        }
    }
    let (r, cx, cy) = placement.ok_or_else(|| {
        Error::Invalid(format!(
            "could not fit a {shape} of radius {:?} on a {}-pixel canvas",
            j.radius, spec.size
        ))
    })?;
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (sin, cos) = theta.sin_cos();

    let base = uniform(rng, j.background);
    let delta = uniform(rng, j.contrast) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let bg: Vec<f64> = (0..spec.channels)
        .map(|_| base + rng.gen_range(-1.0..=1.0) * j.tint)
        .collect();
    let fg: Vec<f64> = bg
        .iter()
        .map(|b| b + delta + rng.gen_range(-1.0..=1.0) * j.tint)
        .collect();

    let n = spec.size;
    let mut coverage = vec![0f64; n * n];
    let inv = 1.0 / SUPERSAMPLE as f64;
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * inv - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * inv - cy;
                    // Inverse rotation into shape-local coordinates.
                    let u = (cos * px + sin * py) / r;
                    let v = (-sin * px + cos * py) / r;
                    if shape.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            coverage[y * n + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }

    let mut pixels = Vec::with_capacity(spec.channels * n * n);
    for ch in 0..spec.channels {
        for &a in &coverage {
            let clean = bg[ch] * (1.0 - a) + fg[ch] * a;
            let noisy = clean + rng.gen_range(-1.0..=1.0) * j.noise;
            pixels.push(quantize(noisy as f32) as f32 / 255.0);
        }
    }
    Ok(pixels)
}

/// Renders `samples_per_class` images per shape, classes interleaved
/// (`id = i * classes + class`). Pixels are quantized to multiples of 1/255
/// so the dataset survives a CIFAR round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.shapes.len();
    let mut samples = Vec::with_capacity(classes * spec.samples_per_class);
    for i in 0..spec.samples_per_class {
        for (label, &shape) in spec.shapes.iter().enumerate() {
            let id = (i * classes + label) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(id);
            let pixels = render(spec, shape, &mut rng)?;
            samples.push(ImageSample {
                pixels: Tensor::new(vec![spec.channels, spec.size, spec.size], pixels)?,
                label,
                id,
            });
        }
    }
    Dataset::new(samples, Split::Train, classes)
}
