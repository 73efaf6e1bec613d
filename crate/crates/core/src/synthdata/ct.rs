use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::CtPatch;

use super::GeneratorConfig;

pub(super) const BACKGROUND_HU: f64 = -800.0;
pub(super) const LESION_HU: f64 = 40.0;

/// Analytic lesion support for each class.
enum Shape {
    /// Gaussian profile truncated at `2σ`.
    Blob {
        cx: f64,
        cy: f64,
        sigma: f64,
    },
    Ring {
        cx: f64,
        cy: f64,
        inner: f64,
        outer: f64,
    },
    /// Star-shaped region with piecewise-linear radius in angle.
    Star {
        cx: f64,
        cy: f64,
        radii: Vec<f64>,
        phase: f64,
    },
    Dots {
        centers: Vec<(f64, f64)>,
        radius: f64,
    },
    None,
}

impl Shape {
    fn sample(label: usize, size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64 / 64.0;
        let center = |rng: &mut dyn rand::RngCore, reach: f64| {
            let lo = reach + 1.0;
            let hi = (size as f64 - reach - 2.0).max(lo + 1e-3);
            (rng.random_range(lo..hi), rng.random_range(lo..hi))
        };
        match label {
            0 => {
                let sigma = rng.random_range(3.0..5.0) * s;
                let (cx, cy) = center(rng, 2.0 * sigma);
                Shape::Blob { cx, cy, sigma }
            }
            1 => {
                let inner = rng.random_range(6.0..9.0) * s;
                let outer = inner + rng.random_range(3.0..4.5) * s;
                let (cx, cy) = center(rng, outer);
                Shape::Ring { cx, cy, inner, outer }
            }
            2 => {
                let base = rng.random_range(12.0..15.0) * s;
                let k = rng.random_range(5..8);
                let radii: Vec<f64> = (0..k).map(|_| base * rng.random_range(0.55..1.0)).collect();
                let (cx, cy) = center(rng, base);
                Shape::Star {
                    cx,
                    cy,
                    radii,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            }
            3 => {
                let radius = 1.6 * s.max(0.5);
                let spread = 12.0 * s;
                let (cx, cy) = center(rng, spread + radius);
                let n = rng.random_range(8..14);
                let centers = (0..n)
                    .map(|_| {
                        (
                            cx + rng.random_range(-spread..spread),
                            cy + rng.random_range(-spread..spread),
                        )
                    })
                    .collect();
                Shape::Dots { centers, radius }
            }
            _ => Shape::None,
        }
    }

    /// Lesion weight in `[0,1]` at pixel centre `(x, y)`; zero outside the support.
    fn weight(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Blob { cx, cy, sigma } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                if r2 <= 4.0 * sigma * sigma {
                    (-r2 / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
            Shape::Ring { cx, cy, inner, outer } => {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                f64::from(u8::from(r >= *inner && r <= *outer))
            }
            Shape::Star { cx, cy, radii, phase } => {
                let (dx, dy) = (x - cx, y - cy);
                let r = (dx * dx + dy * dy).sqrt();
                let k = radii.len();
                let t = ((dy.atan2(dx) - phase).rem_euclid(2.0 * PI)) / (2.0 * PI) * k as f64;
                let i = (t.floor() as usize) % k;
                let f = t - t.floor();
                let edge = radii[i] * (1.0 - f) + radii[(i + 1) % k] * f;
                f64::from(u8::from(r <= edge))
            }
            Shape::Dots { centers, radius } => {
                let hit = centers
                    .iter()
                    .any(|(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius);
                f64::from(u8::from(hit))
            }
            Shape::None => 0.0,
        }
    }
}

pub(super) fn generate(label: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<CtPatch> {
    let n = cfg.ct_size;
    let shape = Shape::sample(label, n, rng);
    let noise = Normal::new(0.0, cfg.ct_noise_hu).map_err(|e| Error::invalid(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let w = shape.weight(x as f64 + 0.5, y as f64 + 0.5);
            let hu = BACKGROUND_HU + w * (LESION_HU - BACKGROUND_HU) + noise.sample(rng);
            pixels.push(hu as f32);
            mask.push(w > 0.0);
        }
    }
    CtPatch::new(n, n, pixels, mask)
}
