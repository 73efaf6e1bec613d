use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

use super::{check_class, check_input, logits_of, Explainable, Heatmap, Method};

fn starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=extent - patch).step_by(stride).collect()
}

/// Slide a `patch × patch` window (all channels) filled with `fill_value`
/// (default: the image mean). Each pixel gets the mean logit drop over the
/// windows that cover it.
pub fn occlusion<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    patch_size: usize,
    stride: usize,
    fill_value: Option<f64>,
) -> Result<Heatmap> {
    let [c, h, w] = check_input(model, input)?;
    check_class(model, class_id)?;
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::invalid(format!(
            "occlusion patch {patch_size} does not fit a {h}x{w} image"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("occlusion stride must be at least 1"));
    }
    let x = input.values();
    let fill = fill_value.unwrap_or_else(|| x.iter().sum::<f64>() / x.len() as f64);
    let windows: Vec<(usize, usize)> = starts(h, patch_size, stride)
        .into_iter()
        .flat_map(|y| starts(w, patch_size, stride).into_iter().map(move |xw| (y, xw)))
        .collect();
    let occluded: Vec<Vec<f64>> = windows
        .iter()
        .map(|&(y0, x0)| {
            let mut v = x.to_vec();
            for ch in 0..c {
                for y in y0..y0 + patch_size {
                    let row = ch * h * w + y * w;
                    v[row + x0..row + x0 + patch_size].fill(fill);
                }
            }
            v
        })
        .collect();
    let mut all: Vec<&[f64]> = vec![x];
    all.extend(occluded.iter().map(Vec::as_slice));
    let z = logits_of(model, &all)?;
    let base = z[0][class_id];
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for (&(y0, x0), zw) in windows.iter().zip(&z[1..]) {
        let drop = base - zw[class_id];
        for y in y0..y0 + patch_size {
            for xx in x0..x0 + patch_size {
                sum[y * w + xx] += drop;
                count[y * w + xx] += 1;
            }
        }
    }
    let avg = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / f64::from(n) } else { 0.0 })
        .collect();
    Heatmap::normalized(h, w, avg, class_id, Method::Occlusion)
}
