//! Procedural patch classes.
//!
//! Each class is a smooth random texture: a sum of oriented Gabor-like blobs
//! on a mid-grey background, defined analytically over `[-1, 1]²`. Views are
//! rendered by sampling the texture through a random similarity transform and
//! applying a brightness/contrast change and pixel noise.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PatchDataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub patches_per_class: usize,
    pub patch_size: usize,
    /// Maximum absolute in-plane rotation of a view, radians.
    pub max_rotation: f64,
    /// Maximum absolute shift of a view, in pixels.
    pub max_translation: f64,
    /// Maximum absolute additive brightness change.
    pub max_brightness: f64,
    /// Maximum relative contrast change.
    pub max_contrast: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    /// Number of blobs per class texture.
    pub blobs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 200,
            patches_per_class: 4,
            patch_size: 16,
            max_rotation: 0.35,
            max_translation: 1.5,
            max_brightness: 0.1,
            max_contrast: 0.2,
            noise_std: 0.04,
            blobs: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.patches_per_class == 0 || self.patch_size < 2 || self.blobs == 0 {
            return Err(Error::Config(
                "synthetic dataset needs classes, patches, blobs and a patch size of at least 2".into(),
            ));
        }
        let ranges = [
            ("max_rotation", self.max_rotation),
            ("max_translation", self.max_translation),
            ("max_brightness", self.max_brightness),
            ("max_contrast", self.max_contrast),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.max_contrast >= 1.0 {
            return Err(Error::Config("max_contrast must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    orientation: f64,
    frequency: f64,
    phase: f64,
    amplitude: f64,
}

impl Blob {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            cx: rng.random_range(-0.7..0.7),
            cy: rng.random_range(-0.7..0.7),
            radius: rng.random_range(0.2..0.5),
            orientation: rng.random_range(0.0..PI),
            frequency: rng.random_range(0.3..1.5),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: rng.random_range(-1.0..1.0),
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * self.orientation.cos() + dy * self.orientation.sin();
        let envelope = (-(dx * dx + dy * dy) / (2.0 * self.radius * self.radius)).exp();
        self.amplitude * envelope * (2.0 * PI * self.frequency * along + self.phase).cos()
    }
}

fn texture(blobs: &[Blob], x: f64, y: f64) -> f64 {
    0.5 + 0.3 * blobs.iter().map(|b| b.eval(x, y)).sum::<f64>()
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

fn render_view(blobs: &[Blob], cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let s = cfg.patch_size;
    let rot = symmetric(rng, cfg.max_rotation);
    let pixel = 2.0 / s as f64;
    let tx = symmetric(rng, cfg.max_translation) * pixel;
    let ty = symmetric(rng, cfg.max_translation) * pixel;
    let brightness = symmetric(rng, cfg.max_brightness);
    let contrast = 1.0 + symmetric(rng, cfg.max_contrast);
    let noise = Normal::new(0.0, cfg.noise_std).expect("valid std");
    let (sin, cos) = rot.sin_cos();
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            // Pixel centre in [-1, 1]², mapped back into texture coordinates.
            let px = (col as f64 + 0.5) * pixel - 1.0 - tx;
            let py = (row as f64 + 0.5) * pixel - 1.0 - ty;
            let (x, y) = (cos * px + sin * py, -sin * px + cos * py);
            let mut v = 0.5 + contrast * (texture(blobs, x, y) - 0.5) + brightness;
            if cfg.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Renders `num_classes × patches_per_class` patches. Class `c` is drawn
/// from its own sub-stream, so datasets with a common seed share classes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<PatchDataset> {
    cfg.validate()?;
    let s = cfg.patch_size;
    let n = cfg.num_classes * cfg.patches_per_class;
    let mut pixels = Array2::zeros((n, s * s));
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.num_classes {
        let mut rng = stream_rng(cfg.seed, Stream::Synth, c as u64, 0);
        let blobs: Vec<Blob> = (0..cfg.blobs).map(|_| Blob::draw(&mut rng)).collect();
        for k in 0..cfg.patches_per_class {
            let row = c * cfg.patches_per_class + k;
            let view = render_view(&blobs, cfg, &mut rng);
            pixels.row_mut(row).assign(&ndarray::ArrayView1::from(&view));
            labels.push(c as u64);
        }
    }
    PatchDataset::new(s, pixels, &labels)
}
