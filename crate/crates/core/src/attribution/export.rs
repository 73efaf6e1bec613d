use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::raster::{write_gray, write_rgb_planar};

use super::{Heatmap, InsertionCurve};

/// Black → red → yellow → white.
pub fn hot_ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

pub fn write_heatmap_pgm(path: &Path, heatmap: &Heatmap) -> Result<()> {
    let v: Vec<f32> = heatmap.values.iter().map(|&x| x as f32).collect();
    write_gray(path, heatmap.height, heatmap.width, &v)
}

/// Blend a `(1|3, H, W)` image in `[0,1]` with the ramp; opacity grows
/// with relevance up to one half.
pub fn overlay(input: &Tensor<f64>, heatmap: &Heatmap) -> Result<Vec<f32>> {
    let s = input.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) || (s[1], s[2]) != (heatmap.height, heatmap.width) {
        return Err(Error::shape(
            "overlay",
            format!("input {s:?} vs heatmap {}x{}", heatmap.height, heatmap.width),
        ));
    }
    let area = s[1] * s[2];
    let x = input.values();
    let mut out = vec![0.0f32; 3 * area];
    for (i, &h) in heatmap.values.iter().enumerate() {
        let ramp = hot_ramp(h);
        let alpha = 0.5 * h;
        for c in 0..3 {
            let base = if s[0] == 1 { x[i] } else { x[c * area + i] };
            out[c * area + i] = ((1.0 - alpha) * base.clamp(0.0, 1.0) + alpha * ramp[c]) as f32;
        }
    }
    Ok(out)
}

pub fn write_overlay_png(path: &Path, input: &Tensor<f64>, heatmap: &Heatmap) -> Result<()> {
    write_rgb_planar(path, heatmap.height, heatmap.width, &overlay(input, heatmap)?)
}

pub fn write_insertion_csv(path: &Path, curve: &InsertionCurve) -> Result<()> {
    std::fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))
}
