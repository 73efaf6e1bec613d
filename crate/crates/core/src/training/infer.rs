use crate::autodiff::{Real, Tensor};
use crate::error::Result;
use crate::model::{softmax, DualModalModel, Mode};

use super::data::{stack_images, PreparedPatient};

const EVAL_CHUNK: usize = 64;

/// Eval-mode outputs of every sub-network for a list of patients.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ct_logits: Vec<Vec<f64>>,
    pub he_logits: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    /// `(w_ct, w_he)` per patient.
    pub gate: Vec<[f64; 2]>,
    pub fused_logits: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn probabilities(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
        logits.iter().map(|z| softmax(z)).collect()
    }

    pub fn argmax(logits: &[Vec<f64>]) -> Vec<usize> {
        logits.iter().map(|z| crate::model::argmax(z)).collect()
    }
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = *t.shape().last().unwrap_or(&1);
    t.to_f64_vec().chunks(k).map(<[f64]>::to_vec).collect()
}

pub fn ct_logits<T: Real>(model: &DualModalModel<T>, patients: &[PreparedPatient]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(patients.len());
    for chunk in patients.chunks(EVAL_CHUNK) {
        let x = stack_images(&chunk.iter().map(|p| &p.ct).collect::<Vec<_>>())?;
        let (_, z) = model.ct_batch(x.cast(), Mode::Eval)?;
        out.extend(rows(&z));
    }
    Ok(out)
}

/// Logits and attention for each bag.
pub fn he_logits<T: Real>(
    model: &DualModalModel<T>,
    patients: &[PreparedPatient],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut logits = Vec::with_capacity(patients.len());
    let mut attention = Vec::with_capacity(patients.len());
    for p in patients {
        let (a, _, z) = model.he_bag(p.tiles.cast(), Mode::Eval)?;
        logits.push(z.to_f64_vec());
        attention.push(a);
    }
    Ok((logits, attention))
}

pub fn metadata_tensor<T: Real>(patients: &[PreparedPatient]) -> Result<Tensor<T>> {
    let v: Vec<f64> = patients.iter().flat_map(|p| p.meta.standardized).collect();
    Tensor::from_f64(&[patients.len(), 3], &v)
}

pub fn gate_outputs<T: Real>(model: &DualModalModel<T>, patients: &[PreparedPatient]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(patients.len());
    for chunk in patients.chunks(EVAL_CHUNK) {
        let w = model.gate_batch(metadata_tensor(chunk)?, Mode::Eval)?;
        out.extend(w.to_f64_vec().chunks(2).map(|c| [c[0], c[1]]));
    }
    Ok(out)
}

pub fn fuse_rows(ct: &[Vec<f64>], he: &[Vec<f64>], gate: &[[f64; 2]]) -> Vec<Vec<f64>> {
    ct.iter()
        .zip(he)
        .zip(gate)
        .map(|((a, b), w)| a.iter().zip(b).map(|(x, y)| w[0] * x + w[1] * y).collect())
        .collect()
}

pub fn predict_all<T: Real>(model: &DualModalModel<T>, patients: &[PreparedPatient]) -> Result<Predictions> {
    let ct = ct_logits(model, patients)?;
    let (he, attention) = he_logits(model, patients)?;
    let gate = gate_outputs(model, patients)?;
    let fused = fuse_rows(&ct, &he, &gate);
    Ok(Predictions {
        ct_logits: ct,
        he_logits: he,
        attention,
        gate,
        fused_logits: fused,
    })
}
