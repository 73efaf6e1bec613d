use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::softmax;
use crate::seed;

use super::{check_class, check_input, logits_of, Explainable, Heatmap};

/// Starting image for insertion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaselineMode {
    /// Gaussian blur of the input with this std in pixels.
    Blur(f64),
    Constant(f64),
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::Blur(4.0)
    }
}

impl BaselineMode {
    pub fn image(self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            BaselineMode::Blur(sigma) => gaussian_blur(input, sigma),
            BaselineMode::Constant(v) => Ok(Tensor::full(input.shape(), v)),
        }
    }
}

/// Separable Gaussian blur of each channel of a `(C, H, W)` image, kernel
/// radius `⌈3σ⌉`, replicated borders.
pub fn gaussian_blur(input: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    if input.rank() != 3 {
        return Err(Error::shape("gaussian_blur", format!("{:?}", input.shape())));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(input.clone());
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = input.values().to_vec();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * plane[y * w + clamp(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Target-class probability as pixels are revealed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionCurve {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
    /// The heatmap was all zero and raster order was used instead.
    pub raster_fallback: bool,
}

impl InsertionCurve {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fraction", "probability"]).expect("in-memory write");
        for (f, p) in self.fractions.iter().zip(&self.probabilities) {
            w.write_record([f.to_string(), p.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Pixel indices by descending value; ties keep raster order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

pub fn random_order(pixels: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pixels).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Insertion curve for an explicit pixel order over the `H × W` plane.
pub fn insertion_curve_with_order<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    order: &[usize],
    class_id: usize,
    n_steps: usize,
    baseline: BaselineMode,
) -> Result<InsertionCurve> {
    let [c, h, w] = check_input(model, input)?;
    check_class(model, class_id)?;
    let plane = h * w;
    if order.len() != plane {
        return Err(Error::shape(
            "insertion order",
            format!("{} indices for {plane} pixels", order.len()),
        ));
    }
    if n_steps == 0 {
        return Err(Error::invalid("insertion needs at least one step"));
    }
    let x = input.values();
    let mut current = baseline.image(input)?.into_values();
    let mut images = Vec::with_capacity(n_steps + 1);
    images.push(current.clone());
    let mut revealed = 0;
    for s in 1..=n_steps {
        let k = s * plane / n_steps;
        for &p in &order[revealed..k] {
            for ch in 0..c {
                current[ch * plane + p] = x[ch * plane + p];
            }
        }
        revealed = k;
        images.push(current.clone());
    }
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let probabilities: Vec<f64> = logits_of(model, &refs)?.iter().map(|z| softmax(z)[class_id]).collect();
    let dx = 1.0 / n_steps as f64;
    let auc = probabilities.windows(2).map(|p| 0.5 * (p[0] + p[1]) * dx).sum();
    Ok(InsertionCurve {
        fractions: (0..=n_steps).map(|s| s as f64 / n_steps as f64).collect(),
        probabilities,
        auc,
        raster_fallback: false,
    })
}

/// Reveal pixels in descending heatmap order in `n_steps` equal batches and
/// integrate the target-class probability with the trapezoid rule.
pub fn insertion_auc<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    heatmap: &Heatmap,
    class_id: usize,
    n_steps: usize,
    baseline: BaselineMode,
) -> Result<InsertionCurve> {
    let [_, h, w] = check_input(model, input)?;
    if (heatmap.height, heatmap.width) != (h, w) {
        return Err(Error::shape(
            "insertion_auc",
            format!("heatmap {}x{} vs input {h}x{w}", heatmap.height, heatmap.width),
        ));
    }
    let order = descending_order(&heatmap.values);
    let mut curve = insertion_curve_with_order(model, input, &order, class_id, n_steps, baseline)?;
    curve.raster_fallback = heatmap.is_zero();
    Ok(curve)
}

fn iou(selected: &[bool], mask: &[bool]) -> f64 {
    let inter = selected.iter().zip(mask).filter(|(a, b)| **a && **b).count();
    let union = selected.iter().zip(mask).filter(|(a, b)| **a || **b).count();
    inter as f64 / union as f64
}

fn check_mask(values: &[f64], mask: &[bool]) -> Result<usize> {
    if values.len() != mask.len() {
        return Err(Error::shape(
            "localization_iou",
            format!("{} vs {}", values.len(), mask.len()),
        ));
    }
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return Err(Error::invalid("IoU is undefined for an empty lesion mask"));
    }
    Ok(k)
}

/// Area-matched IoU: the heatmap's top-`|mask|` pixels (ties in raster
/// order) against the mask.
pub fn localization_iou(heatmap: &[f64], mask: &[bool]) -> Result<f64> {
    let k = check_mask(heatmap, mask)?;
    let mut selected = vec![false; heatmap.len()];
    for &i in &descending_order(heatmap)[..k] {
        selected[i] = true;
    }
    Ok(iou(&selected, mask))
}

/// IoU of `heatmap ≥ threshold` against the mask.
pub fn threshold_iou(heatmap: &[f64], mask: &[bool], threshold: f64) -> Result<f64> {
    check_mask(heatmap, mask)?;
    let selected: Vec<bool> = heatmap.iter().map(|&v| v >= threshold).collect();
    Ok(iou(&selected, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let mask = [true, true, false, false];
        assert_eq!(localization_iou(&[1.0, 1.0, 0.0, 0.0], &mask).unwrap(), 1.0);
        assert_eq!(localization_iou(&[0.0, 0.0, 1.0, 0.5], &mask).unwrap(), 0.0);
        assert!((localization_iou(&[1.0, 0.0, 0.9, 0.0], &mask).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(localization_iou(&[1.0; 4], &[false; 4]).is_err());
        assert_eq!(threshold_iou(&[0.9, 0.6, 0.1, 0.2], &mask, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ties_follow_raster_order() {
        assert_eq!(descending_order(&[0.5, 1.0, 0.5, 1.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let c = Tensor::full(&[1, 5, 6], 2.5);
        let b = gaussian_blur(&c, 1.5).unwrap();
        assert!(b.values().iter().all(|v| (v - 2.5).abs() < 1e-12));
        let mut spike = Tensor::zeros(&[1, 41, 41]);
        spike.values_mut()[20 * 41 + 20] = 1.0;
        let s = gaussian_blur(&spike, 4.0).unwrap();
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(s.values()[20 * 41 + 20] > s.values()[20 * 41 + 21]);
    }
}
