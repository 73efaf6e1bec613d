use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::seed;

use super::{check_class, check_input, class_gradients, AttributionMap, Explainable, Method};

/// `|∂ logit_c / ∂ x|` per input element.
pub fn saliency<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
) -> Result<AttributionMap> {
    let shape = check_input(model, input)?;
    let (_, g) = class_gradients(model, &[input.values()], class_id)?.remove(0);
    Ok(AttributionMap {
        shape,
        values: g.into_iter().map(f64::abs).collect(),
        class_id,
        method: Method::Saliency,
    })
}

/// Mean input gradient over `n_samples` Gaussian perturbations with std
/// `sigma · (max − min)` of the input; absolute value taken after averaging.
pub fn smoothgrad<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<AttributionMap> {
    if n_samples == 0 || !(sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "smoothgrad needs n_samples ≥ 1 and sigma ≥ 0, got {n_samples}, {sigma}"
        )));
    }
    if sigma == 0.0 {
        return saliency(model, input, class_id).map(|m| AttributionMap {
            method: Method::Smoothgrad,
            ..m
        });
    }
    let shape = check_input(model, input)?;
    check_class(model, class_id)?;
    let x = input.values();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let std = sigma * (hi - lo);
    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let samples: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| x.iter().map(|&v| v + noise.sample(&mut rng)).collect())
        .collect();
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    let mut mean = vec![0.0; x.len()];
    for (_, g) in class_gradients(model, &refs, class_id)? {
        for (m, gi) in mean.iter_mut().zip(g) {
            *m += gi;
        }
    }
    Ok(AttributionMap {
        shape,
        values: mean.into_iter().map(|m| (m / n_samples as f64).abs()).collect(),
        class_id,
        method: Method::Smoothgrad,
    })
}

/// `(x − x') ⊙` mean gradient at the midpoints `x' + ((k + ½)/steps)(x − x')`.
pub fn integrated_gradients<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    baseline: &Tensor<f64>,
    steps: usize,
    class_id: usize,
) -> Result<AttributionMap> {
    let shape = check_input(model, input)?;
    if baseline.shape() != input.shape() {
        return Err(Error::shape(
            "integrated_gradients",
            format!("baseline {:?} vs input {:?}", baseline.shape(), input.shape()),
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    check_class(model, class_id)?;
    let (x, b) = (input.values(), baseline.values());
    let diff: Vec<f64> = x.iter().zip(b).map(|(xi, bi)| xi - bi).collect();
    let points: Vec<Vec<f64>> = (0..steps)
        .map(|k| {
            let alpha = (k as f64 + 0.5) / steps as f64;
            b.iter().zip(&diff).map(|(bi, d)| bi + alpha * d).collect()
        })
        .collect();
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let mut total = vec![0.0; x.len()];
    for (_, g) in class_gradients(model, &refs, class_id)? {
        for (t, gi) in total.iter_mut().zip(g) {
            *t += gi;
        }
    }
    Ok(AttributionMap {
        shape,
        values: total
            .into_iter()
            .zip(&diff)
            .map(|(t, d)| d * t / steps as f64)
            .collect(),
        class_id,
        method: Method::IntegratedGradients,
    })
}
