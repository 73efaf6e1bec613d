use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::{beer_lambert, RgbTile, StainReference};

use super::GeneratorConfig;

/// Fraction of tiles in a lesional slide that show the class pattern; at
/// least one always does.
const LESION_TILE_PROB: f64 = 0.6;
/// Target area covered by background nuclei.
const NUCLEI_COVERAGE: f64 = 0.08;

struct Canvas {
    n: usize,
    conc: Vec<[f64; 2]>,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(n: usize) -> Self {
        Self {
            n,
            conc: vec![[0.0; 2]; n * n],
            mask: vec![false; n * n],
        }
    }

    /// Apply `f` to every pixel whose centre lies within `r` of `(cx, cy)`.
    fn disk(&mut self, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize, &mut [f64; 2], &mut bool)) {
        let n = self.n as isize;
        let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        for y in y0.max(0)..=y1.min(n - 1) {
            for x in x0.max(0)..=x1.min(n - 1) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                    let i = (y * n + x) as usize;
                    f(i, &mut self.conc[i], &mut self.mask[i]);
                }
            }
        }
    }
}

fn background(canvas: &mut Canvas, rng: &mut impl Rng) {
    let n = canvas.n;
    // Smooth eosin stroma from a few random low-frequency waves.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..6.3),
            )
        })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let t: f64 = waves
                .iter()
                .map(|(a, b, p)| (a * x as f64 + b * y as f64 + p).sin())
                .sum::<f64>()
                / 3.0;
            canvas.conc[y * n + x] = [0.05, 0.35 + 0.08 * t];
        }
    }
    let r = 1.5;
    let per_nucleus = std::f64::consts::PI * r * r;
    let count = (NUCLEI_COVERAGE * (n * n) as f64 / per_nucleus).round() as usize;
    for _ in 0..count {
        let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        canvas.disk(cx, cy, r, |_, c, _| c[0] = 0.8);
    }
}

fn lesion(label: usize, canvas: &mut Canvas, rng: &mut impl Rng) {
    let n = canvas.n as f64;
    let s = n / 32.0;
    let pos = |rng: &mut dyn rand::RngCore, margin: f64| {
        let lo = margin.min(n / 2.0 - 1.0);
        (rng.random_range(lo..n - lo), rng.random_range(lo..n - lo))
    };
    match label {
        // Coarse eosin-rich glands.
        0 => {
            for _ in 0..rng.random_range(2..4) {
                let r = rng.random_range(5.0..8.0) * s;
                let (cx, cy) = pos(rng, r * 0.5);
                canvas.disk(cx, cy, r, |_, c, m| {
                    *c = [0.08, 1.1];
                    *m = true;
                });
            }
        }
        // Dense hematoxylin clusters.
        1 => {
            for _ in 0..rng.random_range(2..4) {
                let r = rng.random_range(5.0..7.0) * s;
                let (cx, cy) = pos(rng, r * 0.5);
                canvas.disk(cx, cy, r, |_, c, m| {
                    *c = [1.2, 0.4];
                    *m = true;
                });
            }
        }
        // Sparse large nuclei.
        2 => {
            for _ in 0..rng.random_range(3..6) {
                let r = rng.random_range(3.0..4.0) * s;
                let (cx, cy) = pos(rng, r);
                canvas.disk(cx, cy, r, |_, c, m| {
                    *c = [1.0, 0.25];
                    *m = true;
                });
            }
        }
        // Fine speckle of tiny nuclei within one region.
        3 => {
            let r = rng.random_range(9.0..12.0) * s;
            let (cx, cy) = pos(rng, r * 0.5);
            let flips: Vec<bool> = (0..canvas.n * canvas.n).map(|_| rng.random::<f64>() < 0.5).collect();
            canvas.disk(cx, cy, r, |i, c, m| {
                if flips[i] {
                    c[0] = 1.0;
                }
                c[1] = 0.3;
                *m = true;
            });
        }
        _ => {}
    }
}

/// Perturbed stain matrix and intensity scale for one slide.
fn slide_stains(rng: &mut impl Rng) -> ([[f64; 3]; 2], f64) {
    let base = StainReference::standard().stain_matrix;
    let mut out = base;
    for v in &mut out {
        for c in v.iter_mut() {
            *c = (*c + rng.random_range(-0.08..0.08)).max(0.01);
        }
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        v.iter_mut().for_each(|c| *c /= norm);
    }
    (out, rng.random_range(0.8..1.2))
}

pub(super) fn generate_slide(
    label: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<RgbTile>, Vec<Vec<bool>>)> {
    let (stains, scale) = slide_stains(rng);
    let noise = Normal::new(0.0, cfg.he_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let lesional = super::has_lesion(label);
    let forced = rng.random_range(0..cfg.tiles_per_slide);
    let mut tiles = Vec::with_capacity(cfg.tiles_per_slide);
    let mut masks = Vec::with_capacity(cfg.tiles_per_slide);
    for t in 0..cfg.tiles_per_slide {
        let mut canvas = Canvas::new(cfg.tile_size);
        background(&mut canvas, rng);
        if lesional && (t == forced || rng.random::<f64>() < LESION_TILE_PROB) {
            lesion(label, &mut canvas, rng);
        }
        let conc: Vec<[f64; 2]> = canvas.conc.iter().map(|c| [c[0] * scale, c[1] * scale]).collect();
        let tile = beer_lambert(cfg.tile_size, cfg.tile_size, &stains, &conc)?;
        let px: Vec<f32> = tile.pixels.iter().map(|&v| v + noise.sample(rng) as f32).collect();
        tiles.push(RgbTile::new(cfg.tile_size, cfg.tile_size, px)?);
        masks.push(canvas.mask);
    }
    Ok((tiles, masks))
}
