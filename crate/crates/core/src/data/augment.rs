//! Random rotation, flipping and cropping.
//!
//! A draw is split into [`AugmentParams`] so that the anchor and positive of
//! a pair can share one transform.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Random multiples of 90° and flips.
    pub rot90_flip: bool,
    /// Maximum absolute extra rotation, radians.
    pub max_angle: f64,
    /// Smallest crop side relative to the patch; 1 disables cropping.
    pub min_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot90_flip: true,
            max_angle: 0.1,
            min_crop: 0.9,
        }
    }
}

impl AugmentConfig {
    /// Every draw is the identity.
    pub fn none() -> Self {
        Self {
            rot90_flip: false,
            max_angle: 0.0,
            min_crop: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_angle >= 0.0 && self.max_angle.is_finite()) {
            return Err(Error::Config(format!("aug_max_angle must be non-negative, got {}", self.max_angle)));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::Config(format!("aug_min_crop must be in (0, 1], got {}", self.min_crop)));
        }
        Ok(())
    }
}

/// One concrete transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub angle: f64,
    /// Crop side relative to the patch.
    pub crop: f64,
    /// Crop centre offset in pixels.
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        quarter_turns: 0,
        flip_horizontal: false,
        flip_vertical: false,
        angle: 0.0,
        crop: 1.0,
        shift: (0.0, 0.0),
    };

    pub fn draw(cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::IDENTITY;
        if cfg.rot90_flip {
            p.quarter_turns = rng.random_range(0..4);
            p.flip_horizontal = rng.random_bool(0.5);
            p.flip_vertical = rng.random_bool(0.5);
        }
        if cfg.max_angle > 0.0 {
            p.angle = rng.random_range(-cfg.max_angle..=cfg.max_angle);
        }
        if cfg.min_crop < 1.0 {
            p.crop = rng.random_range(cfg.min_crop..=1.0);
            let slack = (1.0 - p.crop) * size as f64 / 2.0;
            p.shift = (rng.random_range(-slack..=slack), rng.random_range(-slack..=slack));
        }
        p
    }

    /// Applies the transform to a flattened `size × size` patch.
    pub fn apply(&self, patch: &[f64], size: usize) -> Result<Vec<f64>> {
        if patch.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "augment: {} pixels for a {size}x{size} patch",
                patch.len()
            )));
        }
        let mut out = if self.angle != 0.0 || self.crop != 1.0 || self.shift != (0.0, 0.0) {
            self.resample(patch, size)
        } else {
            patch.to_vec()
        };
        for _ in 0..self.quarter_turns {
            out = rotate90(&out, size);
        }
        if self.flip_horizontal {
            out = flip_horizontal(&out, size);
        }
        if self.flip_vertical {
            out = flip_vertical(&out, size);
        }
        Ok(out)
    }

    // Bilinear sampling of the rotated, scaled crop window, edge-clamped.
    fn resample(&self, patch: &[f64], size: usize) -> Vec<f64> {
        let c = (size as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angle.sin_cos();
        let at = |r: isize, q: isize| {
            let r = r.clamp(0, size as isize - 1) as usize;
            let q = q.clamp(0, size as isize - 1) as usize;
            patch[r * size + q]
        };
        let mut out = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                let (dx, dy) = (col as f64 - c, row as f64 - c);
                let x = c + self.shift.0 + self.crop * (cos * dx - sin * dy);
                let y = c + self.shift.1 + self.crop * (sin * dx + cos * dy);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                let v = at(yi, xi) * (1.0 - fx) * (1.0 - fy)
                    + at(yi, xi + 1) * fx * (1.0 - fy)
                    + at(yi + 1, xi) * (1.0 - fx) * fy
                    + at(yi + 1, xi + 1) * fx * fy;
                out.push(v.clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn rotate90(p: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            out[(s - 1 - c) * s + r] = p[r * s + c];
        }
    }
    out
}

fn flip_horizontal(p: &[f64], s: usize) -> Vec<f64> {
    p.chunks(s).flat_map(|row| row.iter().rev().copied()).collect()
}

fn flip_vertical(p: &[f64], s: usize) -> Vec<f64> {
    p.chunks(s).rev().flatten().copied().collect()
}

/// Draws a transform and applies it. A pure function of the RNG state and
/// the patch.
pub fn augment(patch: &[f64], size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    AugmentParams::draw(cfg, size, rng).apply(patch, size)
}
