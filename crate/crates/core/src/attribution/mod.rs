//! Explanation methods and explanation-quality metrics.
//!
//! Every method works against the [`Explainable`] trait: something that can
//! record an eval-mode forward pass for a batch of `(C, H, W)` inputs and
//! expose named convolutional activations. [`CtExplainer`] and
//! [`TileExplainer`] adapt the dual-modal model, either on branch logits or
//! on fused logits with the other modality held fixed.

mod cam;
pub mod export;
mod faithfulness;
mod gradient;
mod occlusion;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::graph::{self, Bindings};
use crate::model::{DualModalModel, Mode};

pub use cam::{bilinear_upsample, gradcam, gradcampp, gradcampp_alpha};
pub use faithfulness::{
    gaussian_blur, insertion_auc, insertion_curve_with_order, localization_iou, random_order, threshold_iou,
    BaselineMode, InsertionCurve,
};
pub use gradient::{integrated_gradients, saliency, smoothgrad};
pub use occlusion::occlusion;

/// Per-pixel nonnegative relevance, max-normalized to 1 unless all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub class_id: usize,
    pub method: Method,
}

impl Heatmap {
    /// Clip negatives to zero and divide by the maximum.
    pub fn normalized(
        height: usize,
        width: usize,
        mut values: Vec<f64>,
        class_id: usize,
        method: Method,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "heatmap",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{method} heatmap")));
        }
        let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
        for v in &mut values {
            *v = if max > 0.0 { v.max(0.0) / max } else { 0.0 };
        }
        Ok(Self {
            height,
            width,
            values,
            class_id,
            method,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Mean value inside and outside a mask.
    pub fn mask_means(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(Error::shape(
                "mask_means",
                format!("{} vs {}", mask.len(), self.values.len()),
            ));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        if ni == 0 || no == 0 {
            return Err(Error::invalid("mask must have pixels both inside and outside"));
        }
        Ok((si / ni as f64, so / no as f64))
    }
}

/// Signed per-element attribution with the input's `(C, H, W)` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub class_id: usize,
    pub method: Method,
}

impl AttributionMap {
    /// Channel-summed absolute values, max-normalized.
    pub fn to_heatmap(&self) -> Result<Heatmap> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.values[ch * plane..(ch + 1) * plane]) {
                *o += v.abs();
            }
        }
        Heatmap::normalized(h, w, out, self.class_id, self.method)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saliency,
    Smoothgrad,
    IntegratedGradients,
    Occlusion,
    Gradcam,
    Gradcampp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Gradcam,
        Method::Gradcampp,
        Method::IntegratedGradients,
        Method::Occlusion,
        Method::Saliency,
        Method::Smoothgrad,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::Smoothgrad => "smoothgrad",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Occlusion => "occlusion",
            Method::Gradcam => "gradcam",
            Method::Gradcampp => "gradcampp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.id() == s).ok_or_else(|| {
            let ids: Vec<_> = Method::ALL.iter().map(|m| m.id()).collect();
            Error::invalid(format!(
                "unknown attribution method `{s}` (expected one of {})",
                ids.join(", ")
            ))
        })
    }
}

/// Defaults for every method and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub smoothgrad_samples: usize,
    /// Noise std as a fraction of the input's value range.
    pub smoothgrad_sigma: f64,
    pub ig_steps: usize,
    pub occlusion_patch: usize,
    pub occlusion_stride: usize,
    pub insertion_steps: usize,
    pub blur_sigma: f64,
    pub cam_layer: String,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            smoothgrad_samples: 25,
            smoothgrad_sigma: 0.1,
            ig_steps: 128,
            occlusion_patch: 8,
            occlusion_stride: 4,
            insertion_steps: 100,
            blur_sigma: 4.0,
            cam_layer: "block3".into(),
            seed: 0,
        }
    }
}

/// Forward pass recorded by an [`Explainable`].
pub struct Forward {
    /// `(N, K)`.
    pub logits: Var,
    /// Named conv activations, each `(N, C, h, w)`.
    pub layers: Vec<(String, Var)>,
}

/// A frozen scorer over `(N, C, H, W)` batches.
pub trait Explainable<T: Real> {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward>;
}

const CHUNK: usize = 32;

pub(crate) fn check_class<T: Real, M: Explainable<T> + ?Sized>(model: &M, class_id: usize) -> Result<()> {
    if class_id >= model.num_classes() {
        return Err(Error::invalid(format!(
            "class id {class_id} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

pub(crate) fn check_input<T: Real, M: Explainable<T> + ?Sized>(model: &M, input: &Tensor<f64>) -> Result<[usize; 3]> {
    let s = model.input_shape();
    if input.shape() != s {
        return Err(Error::shape(
            "attribution input",
            format!("{:?}, model expects {s:?}", input.shape()),
        ));
    }
    Ok(s)
}

fn batch<T: Real>(shape: [usize; 3], images: &[&[f64]]) -> Result<Tensor<T>> {
    let values: Vec<f64> = images.iter().flat_map(|v| v.iter().copied()).collect();
    Tensor::from_f64(&[images.len(), shape[0], shape[1], shape[2]], &values)
}

fn one_hot_rows<T: Real>(n: usize, k: usize, class_id: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, k]);
    for i in 0..n {
        t.values_mut()[i * k + class_id] = T::one();
    }
    t
}

/// Eval-mode logits for flat `(C·H·W)` images.
pub fn logits_of<T: Real, M: Explainable<T> + ?Sized>(model: &M, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let shape = model.input_shape();
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(batch::<T>(shape, chunk)?);
        let f = model.forward(&mut tape, x)?;
        let z = tape.value(f.logits);
        if z.shape() != [chunk.len(), k] {
            return Err(Error::shape("explainer logits", format!("{:?}", z.shape())));
        }
        out.extend(z.to_f64_vec().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Target-class logit and its input gradient for each image. Images are
/// batched, but rows never interact, so each gradient is exact per image.
pub fn class_gradients<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    images: &[&[f64]],
    class_id: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    check_class(model, class_id)?;
    let shape = model.input_shape();
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut tape = Tape::new();
        let x = tape.leaf(batch::<T>(shape, chunk)?.with_requires_grad(true));
        let f = model.forward(&mut tape, x)?;
        let sel = tape.constant(one_hot_rows(chunk.len(), k, class_id));
        let picked = tape.mul(f.logits, sel)?;
        let s = tape.sum(picked)?;
        let z = tape.value(f.logits).to_f64_vec();
        let g = tape.backward(s)?.wrt(x).to_f64_vec();
        let per = g.len() / chunk.len();
        for (i, gi) in g.chunks(per).enumerate() {
            out.push((z[i * k + class_id], gi.to_vec()));
        }
    }
    Ok(out)
}

/// Activation of `layer` for one image, and the gradient of the
/// target-class logit with respect to it. Both `(C, h, w)`.
pub fn layer_gradient<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    input: &Tensor<f64>,
    class_id: usize,
    layer: &str,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    check_class(model, class_id)?;
    let shape = check_input(model, input)?;
    let mut tape = Tape::new();
    let x = tape.leaf(batch::<T>(shape, &[input.values()])?.with_requires_grad(true));
    let f = model.forward(&mut tape, x)?;
    let names: Vec<&str> = f.layers.iter().map(|(n, _)| n.as_str()).collect();
    let a = f
        .layers
        .iter()
        .find(|(n, _)| n == layer)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            Error::invalid(format!(
                "`{layer}` is not a conv layer (available: {})",
                names.join(", ")
            ))
        })?;
    let sel = tape.constant(one_hot_rows(1, model.num_classes(), class_id));
    let picked = tape.mul(f.logits, sel)?;
    let s = tape.sum(picked)?;
    let grads = tape.backward(s)?;
    let act = tape.value(a);
    let inner = act.shape()[1..].to_vec();
    Ok((
        Tensor::new(inner.clone(), act.to_f64_vec())?,
        Tensor::new(inner, grads.wrt(a).to_f64_vec())?,
    ))
}

/// Which logits an explainer exposes.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Branch,
    /// `w_self · z(x) + w_other · other_logits`, with the gate weights and the
    /// other modality's logits held fixed.
    Fused {
        w_self: f64,
        w_other: f64,
        other_logits: Vec<f64>,
    },
}

impl Target {
    fn apply<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        match self {
            Target::Branch => Ok(z),
            Target::Fused {
                w_self,
                w_other,
                other_logits,
            } => {
                let shape = tape.value(z).shape().to_vec();
                if other_logits.len() != shape[1] {
                    return Err(Error::shape(
                        "fused target",
                        format!("{} logits vs {shape:?}", other_logits.len()),
                    ));
                }
                let rows: Vec<f64> = (0..shape[0])
                    .flat_map(|_| other_logits.iter().map(|v| w_other * v))
                    .collect();
                let c = tape.constant(Tensor::from_f64(&shape, &rows)?);
                let s = tape.scale(z, *w_self)?;
                tape.add(s, c)
            }
        }
    }
}

fn block_names(n: usize) -> impl Iterator<Item = String> {
    (1..=n).map(|i| format!("block{i}"))
}

/// CT branch on a `(1, H, W)` patch.
pub struct CtExplainer<'a, T: Real> {
    model: &'a DualModalModel<T>,
    target: Target,
}

impl<'a, T: Real> CtExplainer<'a, T> {
    pub fn new(model: &'a DualModalModel<T>, target: Target) -> Self {
        Self { model, target }
    }
}

impl<T: Real> Explainable<T> for CtExplainer<'_, T> {
    fn input_shape(&self) -> [usize; 3] {
        let c = &self.model.config.ct;
        [c.in_channels, c.image_size, c.image_size]
    }

    fn num_classes(&self) -> usize {
        self.model.config.ct.num_classes
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let vars = self.model.params.bind(tape, |_| false);
        let out = graph::ct_branch(tape, &vars, &self.model.config, x, Mode::Eval)?;
        let logits = self.target.apply(tape, out.logits)?;
        Ok(Forward {
            logits,
            layers: block_names(out.activations.len()).zip(out.activations).collect(),
        })
    }
}

/// One tile of an H&E bag. The other tiles enter through cached embeddings,
/// so the explained score is the bag-level logit as a function of this tile.
pub struct TileExplainer<'a, T: Real> {
    model: &'a DualModalModel<T>,
    embeddings: Tensor<T>,
    index: usize,
    target: Target,
}

impl<'a, T: Real> TileExplainer<'a, T> {
    /// `tiles` is the whole `(n, 3, h, w)` bag; `index` picks the tile.
    pub fn new(model: &'a DualModalModel<T>, tiles: &Tensor<T>, index: usize, target: Target) -> Result<Self> {
        let n = tiles.shape().first().copied().unwrap_or(0);
        if index >= n {
            return Err(Error::invalid(format!("tile {index} out of range for a bag of {n}")));
        }
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, |_| false);
        let x = tape.constant(tiles.clone());
        let e = graph::encoder(&mut tape, &vars, "he", &model.config.tile, x, &mut Vec::new())?;
        Ok(Self {
            model,
            embeddings: tape.value(e).clone(),
            index,
            target,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    fn rows(&self, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
        let d = self.embeddings.shape()[1];
        Tensor::new(
            vec![range.len(), d],
            self.embeddings.values()[range.start * d..range.end * d].to_vec(),
        )
    }

    fn bag_logits(&self, tape: &mut Tape<T>, vars: &Bindings, emb: Var, item: usize, n: usize) -> Result<Var> {
        let mut sel = Tensor::zeros(&[1, n]);
        sel.values_mut()[item] = T::one();
        let sel = tape.constant(sel);
        let row = tape.matmul(sel, emb)?;
        let total = self.embeddings.shape()[0];
        let mut parts = Vec::new();
        if self.index > 0 {
            let before = self.rows(0..self.index)?;
            parts.push(tape.constant(before));
        }
        parts.push(row);
        if self.index + 1 < total {
            let after = self.rows(self.index + 1..total)?;
            parts.push(tape.constant(after));
        }
        let bag = if parts.len() == 1 { row } else { tape.concat(&parts, 0)? };
        let (_, f) = graph::attention_pool(tape, vars, bag)?;
        graph::head(tape, vars, "he", &self.model.config.tile, f, Mode::Eval)
    }
}

impl<T: Real> Explainable<T> for TileExplainer<'_, T> {
    fn input_shape(&self) -> [usize; 3] {
        let c = &self.model.config.tile;
        [c.in_channels, c.image_size, c.image_size]
    }

    fn num_classes(&self) -> usize {
        self.model.config.tile.num_classes
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let vars = self.model.params.bind(tape, |_| false);
        let n = tape.value(x).shape()[0];
        let mut acts = Vec::new();
        let emb = graph::encoder(tape, &vars, "he", &self.model.config.tile, x, &mut acts)?;
        let mut zs = Vec::with_capacity(n);
        for i in 0..n {
            zs.push(self.bag_logits(tape, &vars, emb, i, n)?);
        }
        let z = if n == 1 { zs[0] } else { tape.concat(&zs, 0)? };
        let logits = self.target.apply(tape, z)?;
        Ok(Forward {
            logits,
            layers: block_names(acts.len()).zip(acts).collect(),
        })
    }
}

/// Run one method with the defaults in `cfg`. `baseline` is the
/// integrated-gradients reference image.
pub fn explain<T: Real, M: Explainable<T> + ?Sized>(
    model: &M,
    method: Method,
    input: &Tensor<f64>,
    class_id: usize,
    baseline: &Tensor<f64>,
    cfg: &AttributionConfig,
) -> Result<Heatmap> {
    match method {
        Method::Saliency => saliency(model, input, class_id)?.to_heatmap(),
        Method::Smoothgrad => smoothgrad(
            model,
            input,
            class_id,
            cfg.smoothgrad_samples,
            cfg.smoothgrad_sigma,
            crate::seed::derive(cfg.seed, "smoothgrad"),
        )?
        .to_heatmap(),
        Method::IntegratedGradients => {
            integrated_gradients(model, input, baseline, cfg.ig_steps, class_id)?.to_heatmap()
        }
        Method::Occlusion => occlusion(model, input, class_id, cfg.occlusion_patch, cfg.occlusion_stride, None),
        Method::Gradcam => gradcam(model, input, class_id, &cfg.cam_layer),
        Method::Gradcampp => gradcampp(model, input, class_id, &cfg.cam_layer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_ids_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!("lime".parse::<Method>().is_err());
    }

    #[test]
    fn normalization_clips_and_scales() {
        let h = Heatmap::normalized(1, 3, vec![-1.0, 2.0, 4.0], 0, Method::Occlusion).unwrap();
        assert_eq!(h.values, vec![0.0, 0.5, 1.0]);
        let z = Heatmap::normalized(1, 2, vec![-1.0, 0.0], 0, Method::Occlusion).unwrap();
        assert!(z.is_zero());
    }

    #[test]
    fn attribution_map_sums_channels() {
        let m = AttributionMap {
            shape: [2, 1, 2],
            values: vec![1.0, -2.0, -3.0, 0.0],
            class_id: 1,
            method: Method::Saliency,
        };
        assert_eq!(m.to_heatmap().unwrap().values, vec![1.0, 0.5]);
    }
}
