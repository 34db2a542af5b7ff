//! Random geometric augmentation of (image, mask) pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::Sample;
use crate::image::Image;
use crate::imgproc::{warp, Interp, Sample as Pixel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation drawn from `U(0, max_rotation_deg)`.
    pub max_rotation_deg: f64,
    /// Per-axis shift drawn from `U(0, max_shift_frac)` of the image size.
    pub max_shift_frac: f64,
    /// Zoom drawn from `U(zoom_range.0, zoom_range.1)` when enabled.
    pub zoom: bool,
    pub zoom_range: (f64, f64),
    /// Horizontal flip with probability 1/2 when enabled.
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 90.0,
            max_shift_frac: 0.05,
            zoom: true,
            zoom_range: (0.95, 1.05),
            flip: false,
        }
    }
}

/// One draw of the random transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub theta: f64,
    pub shift: (f64, f64),
    pub zoom: f64,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        theta: 0.0,
        shift: (0.0, 0.0),
        zoom: 1.0,
        flip: false,
    };

    pub fn random(cfg: &AugmentConfig, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let theta = uniform(0.0, cfg.max_rotation_deg).to_radians();
        let shift = (
            uniform(0.0, cfg.max_shift_frac) * rows as f64,
            uniform(0.0, cfg.max_shift_frac) * cols as f64,
        );
        let zoom = if cfg.zoom {
            uniform(cfg.zoom_range.0, cfg.zoom_range.1)
        } else {
            1.0
        };
        let flip = cfg.flip && rng.random_bool(0.5);
        Transform {
            theta,
            shift,
            zoom,
            flip,
        }
    }

    /// Warps `img` with zero fill outside the source.
    pub fn apply<T: Pixel>(&self, img: &Image<T>, interp: Interp) -> Image<T> {
        let (rows, cols) = img.shape();
        let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let (s, c) = self.theta.sin_cos();
        warp(img, rows, cols, interp, |r, col| {
            let mut dx = col - cx;
            if self.flip {
                dx = -dx;
            }
            let (dy, dx) = ((r - cy) / self.zoom, dx / self.zoom);
            (
                cy + dx * s + dy * c - self.shift.0,
                cx + dx * c - dy * s - self.shift.1,
            )
        })
    }
}

/// Keeps every pair and appends `factor` randomly transformed copies after
/// each. Masks get the same transform with nearest-neighbour sampling.
pub fn augment(pairs: &[Sample], cfg: &AugmentConfig, factor: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * (factor + 1));
    for pair in pairs {
        out.push(pair.clone());
        for _ in 0..factor {
            let t = Transform::random(cfg, pair.image.rows(), pair.image.cols(), &mut rng);
            out.push(Sample {
                image: t.apply(&pair.image, Interp::Bilinear),
                mask: t.apply(&pair.mask, Interp::Nearest),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(n: usize) -> Sample {
        let mask = Image::from_fn(n, n, |r, c| {
            let (y, x) = (r as f64 - 10.0, c as f64 - 12.0);
            u8::from(x * x + y * y < 30.0)
        });
        Sample {
            image: mask.map(|v| v as f32 * 0.8 + 0.1),
            mask,
        }
    }

    #[test]
    fn factor_zero_is_identity() {
        let pairs = vec![disc(24), disc(24)];
        assert_eq!(augment(&pairs, &AugmentConfig::default(), 0, 1), pairs);
    }

    #[test]
    fn counts_and_binary_masks() {
        let pairs = vec![disc(24); 3];
        let cfg = AugmentConfig {
            flip: true,
            ..Default::default()
        };
        let out = augment(&pairs, &cfg, 4, 5);
        assert_eq!(out.len(), 15);
        assert_eq!(out[0], pairs[0]);
        assert!(out.iter().all(|s| s.mask.is_binary()));
        assert!(out[1..5].iter().any(|s| s.mask != pairs[0].mask));
    }

    #[test]
    fn identity_transform_is_exact() {
        let s = disc(24);
        assert_eq!(
            Transform::IDENTITY.apply(&s.image, Interp::Bilinear),
            s.image
        );
        assert_eq!(Transform::IDENTITY.apply(&s.mask, Interp::Nearest), s.mask);
    }
}
