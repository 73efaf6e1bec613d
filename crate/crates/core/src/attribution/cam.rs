use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

use super::{check_input, layer_gradient, Explainable, Heatmap, Method};

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn bilinear_upsample(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("{} values for {h}x{w}", values.len()),
        ));
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// `ReLU(Σ_k w_k A_k)` upsampled to the input and max-normalized.
fn weighted_map<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    act: &Tensor<f64>,
    weights: &[f64],
    class_id: usize,
    method: Method,
) -> Result<Heatmap> {
    let [c, h, w] = [act.shape()[0], act.shape()[1], act.shape()[2]];
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for k in 0..c {
        for (o, a) in cam.iter_mut().zip(&act.values()[k * plane..(k + 1) * plane]) {
            *o += weights[k] * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let [_, ih, iw] = model.input_shape();
    let up = bilinear_upsample(&cam, h, w, ih, iw)?;
    Heatmap::normalized(ih, iw, up, class_id, method)
}

fn layer_parts<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    layer: &str,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    check_input(model, input)?;
    let (a, g) = layer_gradient(model, input, class_id, layer)?;
    if a.rank() != 3 {
        return Err(Error::invalid(format!(
            "layer `{layer}` is not a spatial conv activation"
        )));
    }
    Ok((a, g))
}

/// Channel weights are spatial means of the layer gradient.
pub fn gradcam<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    layer: &str,
) -> Result<Heatmap> {
    let (a, g) = layer_parts(model, input, class_id, layer)?;
    let plane = a.shape()[1] * a.shape()[2];
    let weights: Vec<f64> = g
        .values()
        .chunks(plane)
        .map(|gk| gk.iter().sum::<f64>() / plane as f64)
        .collect();
    weighted_map(model, &a, &weights, class_id, Method::Gradcam)
}

/// Per-location Grad-CAM++ coefficients for one channel, from the first-order
/// gradient `g` under an exponentiated score:
/// `α = g² / (2g² + (Σ A) g³)`, zero where `g = 0` or the denominator vanishes.
pub fn gradcampp_alpha(activation: &[f64], gradient: &[f64]) -> Vec<f64> {
    let sum_a: f64 = activation.iter().sum();
    gradient
        .iter()
        .map(|&g| {
            let g2 = g * g;
            let denom = 2.0 * g2 + sum_a * g2 * g;
            if g == 0.0 || denom == 0.0 {
                0.0
            } else {
                g2 / denom
            }
        })
        .collect()
}

/// Channel weights are `Σ_location α · ReLU(g)`.
pub fn gradcampp<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    layer: &str,
) -> Result<Heatmap> {
    let (a, g) = layer_parts(model, input, class_id, layer)?;
    let plane = a.shape()[1] * a.shape()[2];
    let weights: Vec<f64> = a
        .values()
        .chunks(plane)
        .zip(g.values().chunks(plane))
        .map(|(ak, gk)| {
            gradcampp_alpha(ak, gk)
                .iter()
                .zip(gk)
                .map(|(al, &gi)| al * gi.max(0.0))
                .sum()
        })
        .collect();
    weighted_map(model, &a, &weights, class_id, Method::Gradcampp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_identity_and_constant() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_upsample(&v, 2, 2, 2, 2).unwrap(), v);
        assert!(bilinear_upsample(&[5.0; 4], 2, 2, 7, 3)
            .unwrap()
            .iter()
            .all(|&x| x == 5.0));
    }

    #[test]
    fn upsample_half_pixel_interpolation() {
        let out = bilinear_upsample(&[0.0, 4.0], 1, 2, 1, 4).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn alpha_single_location() {
        let a = gradcampp_alpha(&[0.0, 2.0, 0.0], &[0.0, 0.5, 0.0]);
        assert_eq!(a[0], 0.0);
        assert!((a[1] - 1.0 / (2.0 + 2.0 * 0.5)).abs() < 1e-15);
        let unit = gradcampp_alpha(&[0.0, 2.0], &[0.0, -0.5]);
        assert!((unit[1] - 1.0).abs() < 1e-15);
    }
}
