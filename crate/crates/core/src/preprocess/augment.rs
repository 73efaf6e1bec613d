//! MixUp and CutMix over image samples with soft labels.
//!
//! An image is any tensor whose two trailing axes are `H × W` (a CT patch
//! `1×H×W`, or a tile bag `n×3×H×W`). CutMix cuts the same box from every
//! leading plane.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    /// Class distribution (one-hot for unmixed samples).
    pub label: Vec<f32>,
}

impl Sample {
    pub fn one_hot(image: Tensor<f32>, class: usize, num_classes: usize) -> Self {
        let mut label = vec![0.0; num_classes];
        label[class] = 1.0;
        Self { image, label }
    }
}

/// Axis-aligned box `[top, top+height) × [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

fn check_pairs(a: &[Sample], b: &[Sample]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("mix", format!("batch sizes {} vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.image.shape() != y.image.shape() || x.label.len() != y.label.len() {
            return Err(Error::shape(
                "mix",
                format!("sample shapes {:?} vs {:?}", x.image.shape(), y.image.shape()),
            ));
        }
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixing alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn mix_labels(a: &[f32], b: &[f32], lam: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| lam * x + (1.0 - lam) * y).collect()
}

/// Convex mix of one pair with a fixed `lam`.
pub fn mixup_pair(a: &Sample, b: &Sample, lam: f32) -> Result<Sample> {
    check_pairs(std::slice::from_ref(a), std::slice::from_ref(b))?;
    let values = a
        .image
        .values()
        .iter()
        .zip(b.image.values())
        .map(|(&x, &y)| lam * x + (1.0 - lam) * y)
        .collect();
    Ok(Sample {
        image: Tensor::new(a.image.shape().to_vec(), values)?,
        label: mix_labels(&a.label, &b.label, lam),
    })
}

/// MixUp with `λ ~ Beta(alpha, alpha)` drawn independently per pair.
/// Returns the mixed samples and the λ used for each.
pub fn mixup(a: &[Sample], b: &[Sample], alpha: f64, seed: u64) -> Result<(Vec<Sample>, Vec<f32>)> {
    check_alpha(alpha)?;
    check_pairs(a, b)?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = crate::seed::rng(seed);
    let mut out = Vec::with_capacity(a.len());
    let mut lams = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let lam = beta.sample(&mut rng) as f32;
        out.push(mixup_pair(x, y, lam)?);
        lams.push(lam);
    }
    Ok((out, lams))
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            "cutmix",
            format!("image needs H×W trailing axes, got {shape:?}"),
        ));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "cutmix",
            format!("image must be at least 2×2, got {h}×{w}"),
        ));
    }
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// Paste `cut` from `b` into `a`; the label weight of `a` is
/// `1 − area(cut)/area(image)` for the box as clipped to the image.
pub fn cutmix_pair(a: &Sample, b: &Sample, cut: CutBox) -> Result<(Sample, f32)> {
    check_pairs(std::slice::from_ref(a), std::slice::from_ref(b))?;
    let (planes, h, w) = spatial(a.image.shape())?;
    let top = cut.top.min(h);
    let left = cut.left.min(w);
    let bottom = (cut.top + cut.height).min(h);
    let right = (cut.left + cut.width).min(w);
    let mut values = a.image.values().to_vec();
    let src = b.image.values();
    for p in 0..planes {
        for i in top..bottom {
            let row = p * h * w + i * w;
            values[row + left..row + right].copy_from_slice(&src[row + left..row + right]);
        }
    }
    let area = (bottom - top) * (right - left);
    let lam = 1.0 - area as f32 / (h * w) as f32;
    Ok((
        Sample {
            image: Tensor::new(a.image.shape().to_vec(), values)?,
            label: mix_labels(&a.label, &b.label, lam),
        },
        lam,
    ))
}

/// CutMix: box side ratio `sqrt(1 − λ)`, `λ ~ Beta(alpha, alpha)`, centre
/// uniform over the image, box clipped at the border.
pub fn cutmix(a: &[Sample], b: &[Sample], alpha: f64, seed: u64) -> Result<(Vec<Sample>, Vec<f32>)> {
    check_alpha(alpha)?;
    check_pairs(a, b)?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = crate::seed::rng(seed);
    let mut out = Vec::with_capacity(a.len());
    let mut lams = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let (_, h, w) = spatial(x.image.shape())?;
        let lam: f64 = beta.sample(&mut rng);
        let r = (1.0 - lam).sqrt();
        let bh = (h as f64 * r).round() as i64;
        let bw = (w as f64 * r).round() as i64;
        let cy = rng.random_range(0..h) as i64;
        let cx = rng.random_range(0..w) as i64;
        let top = (cy - bh / 2).clamp(0, h as i64);
        let left = (cx - bw / 2).clamp(0, w as i64);
        let bottom = (cy + bh - bh / 2).clamp(0, h as i64);
        let right = (cx + bw - bw / 2).clamp(0, w as i64);
        let cut = CutBox {
            top: top as usize,
            left: left as usize,
            height: (bottom - top) as usize,
            width: (right - left) as usize,
        };
        let (s, l) = cutmix_pair(x, y, cut)?;
        out.push(s);
        lams.push(l);
    }
    Ok((out, lams))
}
