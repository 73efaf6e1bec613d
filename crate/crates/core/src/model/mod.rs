//! Dual-modal classifier: CT branch, attention-MIL H&E branch, clinical
//! metadata encoder, modality gate and logit-level fusion.

pub mod checkpoint;
pub mod config;
pub mod graph;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::{CtPatch, MetadataVector, RgbTile};
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
pub use config::{BranchConfig, ModelConfig, CLASS_NAMES, NORMAL_CLASS, NUM_CLASSES};
pub use graph::{Bindings, Mode};

/// Unnormalized class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

/// Convex pair of modality weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub w_ct: f64,
    pub w_he: f64,
}

impl ModalityWeights {
    pub fn new(w_ct: f64, w_he: f64) -> Result<Self> {
        if !(w_ct >= 0.0 && w_he >= 0.0) || (w_ct + w_he - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "modality weights ({w_ct}, {w_he}) must be nonnegative and sum to 1"
            )));
        }
        Ok(Self { w_ct, w_he })
    }
}

/// Per-tile attention; a probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEmbedding(pub Vec<f64>);

/// Parameter initialisation rule.
#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    for (prefix, b) in [("ct", &cfg.ct), ("he", &cfg.tile)] {
        let mut cin = b.in_channels;
        for (i, &cout) in b.channels.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            out.push((
                format!("{prefix}.conv{}.weight", i + 1),
                vec![cout, cin, b.kernel, b.kernel],
                Init::Normal((2.0 / fan_in as f64).sqrt()),
            ));
            out.push((format!("{prefix}.conv{}.bias", i + 1), vec![cout], Init::Zero));
            cin = cout;
        }
        let d = b.feature_dim();
        out.push((
            format!("{prefix}.head.weight"),
            vec![b.num_classes, d],
            Init::Normal((1.0 / d as f64).sqrt()),
        ));
        out.push((format!("{prefix}.head.bias"), vec![b.num_classes], Init::Zero));
    }
    let d = cfg.tile.feature_dim();
    out.push((
        "he.attn.v".into(),
        vec![cfg.attention_hidden, d],
        Init::Normal((1.0 / d as f64).sqrt()),
    ));
    out.push((
        "he.attn.w".into(),
        vec![1, cfg.attention_hidden],
        Init::Normal((1.0 / cfg.attention_hidden as f64).sqrt()),
    ));
    let mut fan_in = 3;
    for (i, &h) in cfg.meta_hidden.iter().enumerate() {
        out.push((
            format!("meta.fc{}.weight", i + 1),
            vec![h, fan_in],
            Init::Normal((2.0 / fan_in as f64).sqrt()),
        ));
        out.push((format!("meta.fc{}.bias", i + 1), vec![h], Init::Zero));
        fan_in = h;
    }
    out.push(("gate.weight".into(), vec![2, cfg.embedding_dim()], Init::Zero));
    out.push(("gate.bias".into(), vec![2], Init::Zero));
    out
}

/// Model parameters together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DualModalModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> DualModalModel<T> {
    /// He-normal convolutions and hidden layers, scaled-normal heads and
    /// attention, zero biases and a zero gate.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let values: Vec<T> = match init {
                Init::Zero => vec![T::zero(); n],
                Init::Normal(std) => {
                    let mut rng = seed::rng(seed::derive(seed, &name));
                    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
            };
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        Ok(Self { config, params })
    }

    /// Check that `params` holds exactly the tensors the config calls for.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "parameter",
                    format!("`{name}` is {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> DualModalModel<U> {
        DualModalModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// `(N, 1, H, W)` batch → `(N, D)` features and `(N, K)` logits.
    pub fn ct_batch(&self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let out = graph::ct_branch(&mut tape, &vars, &self.config, xv, mode)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// One bag `(n, 3, h, w)` → attention, `(1, D)` features, `(1, K)` logits.
    pub fn he_bag(&self, tiles: Tensor<T>, mode: Mode) -> Result<(Vec<f64>, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let tv = tape.constant(tiles);
        let out = graph::he_branch(&mut tape, &vars, &self.config, tv, mode)?;
        Ok((
            tape.value(out.attention).to_f64_vec(),
            tape.value(out.features).clone(),
            tape.value(out.logits).clone(),
        ))
    }

    /// `(B, 3)` standardized metadata → `(B, 2)` gate weights.
    pub fn gate_batch(&self, meta: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let m = tape.constant(meta);
        let e = graph::metadata_mlp(&mut tape, &vars, &self.config, m, mode)?;
        let w = graph::gate(&mut tape, &vars, e)?;
        Ok(tape.value(w).clone())
    }
}

/// `(1, 1, H, W)` tensor from a normalized patch.
pub fn patch_tensor<T: Real>(patch: &CtPatch, cfg: &BranchConfig) -> Result<Tensor<T>> {
    if patch.height != cfg.image_size || patch.width != cfg.image_size {
        return Err(Error::shape(
            "ct_forward",
            format!(
                "patch {}×{}, model expects {}²",
                patch.height, patch.width, cfg.image_size
            ),
        ));
    }
    if patch.pixels.iter().any(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
        return Err(Error::invalid("CT patch must be window-normalized to [0,1]"));
    }
    Tensor::new(
        vec![1, 1, patch.height, patch.width],
        patch.pixels.iter().map(|&v| T::of(f64::from(v))).collect(),
    )
}

/// `(n, 3, h, w)` tensor from a bag of tiles.
pub fn bag_tensor<T: Real>(bag: &[RgbTile], cfg: &BranchConfig) -> Result<Tensor<T>> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    let s = cfg.image_size;
    let mut values = Vec::with_capacity(bag.len() * 3 * s * s);
    for t in bag {
        if t.height != s || t.width != s {
            return Err(Error::shape(
                "he_forward",
                format!("tile {}×{}, model expects {s}²", t.height, t.width),
            ));
        }
        values.extend(t.pixels.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(vec![bag.len(), 3, s, s], values)
}

/// Reject metadata that was not z-scored: invalid category codes or
/// implausibly large standardized values.
pub fn check_standardized(m: &MetadataVector) -> Result<()> {
    if m.sex > 1 || m.smoking > 2 {
        return Err(Error::invalid(format!(
            "metadata codes sex={} smoking={} out of range; standardize raw metadata first",
            m.sex, m.smoking
        )));
    }
    if m.standardized.iter().any(|z| !z.is_finite() || z.abs() > 10.0) {
        return Err(Error::invalid(format!(
            "metadata {:?} does not look standardized",
            m.standardized
        )));
    }
    Ok(())
}

pub fn ct_forward<T: Real>(model: &DualModalModel<T>, patch: &CtPatch, mode: Mode) -> Result<(Vec<f64>, Logits)> {
    let x = patch_tensor(patch, &model.config.ct)?;
    let (f, z) = model.ct_batch(x, mode)?;
    Ok((f.to_f64_vec(), Logits(z.to_f64_vec())))
}

pub fn he_forward<T: Real>(
    model: &DualModalModel<T>,
    bag: &[RgbTile],
    mode: Mode,
) -> Result<(AttentionWeights, Vec<f64>, Logits)> {
    let x = bag_tensor(bag, &model.config.tile)?;
    let (a, f, z) = model.he_bag(x, mode)?;
    Ok((AttentionWeights(a), f.to_f64_vec(), Logits(z.to_f64_vec())))
}

pub fn metadata_encode<T: Real>(
    model: &DualModalModel<T>,
    m: &MetadataVector,
    mode: Mode,
) -> Result<ClinicalEmbedding> {
    check_standardized(m)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::from_f64(&[1, 3], &m.standardized)?);
    let e = graph::metadata_mlp(&mut tape, &vars, &model.config, x, mode)?;
    Ok(ClinicalEmbedding(tape.value(e).to_f64_vec()))
}

pub fn gate_weights<T: Real>(model: &DualModalModel<T>, e: &ClinicalEmbedding) -> Result<ModalityWeights> {
    let dim = model.config.embedding_dim();
    if e.0.len() != dim {
        return Err(Error::shape(
            "gate_weights",
            format!("embedding of {} values, expected {dim}", e.0.len()),
        ));
    }
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::from_f64(&[1, dim], &e.0)?);
    let w = graph::gate(&mut tape, &vars, x)?;
    let w = tape.value(w).to_f64_vec();
    Ok(ModalityWeights { w_ct: w[0], w_he: w[1] })
}

pub fn fuse_logits(z_ct: &Logits, z_he: &Logits, w: &ModalityWeights) -> Result<Logits> {
    if z_ct.0.len() != z_he.0.len() {
        return Err(Error::shape(
            "fuse_logits",
            format!("{} vs {} logits", z_ct.0.len(), z_he.0.len()),
        ));
    }
    ModalityWeights::new(w.w_ct, w.w_he)?;
    Ok(Logits(
        z_ct.0
            .iter()
            .zip(&z_he.0)
            .map(|(a, b)| w.w_ct * a + w.w_he * b)
            .collect(),
    ))
}

/// Numerically stable softmax.
pub fn predict_proba(z: &Logits) -> Vec<f64> {
    softmax(&z.0)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.ct.image_size = 16;
        cfg.ct.channels = vec![2, 4];
        cfg.tile.image_size = 8;
        cfg.tile.channels = vec![2, 3];
        cfg.attention_hidden = 2;
        cfg.meta_hidden = vec![4, 3];
        cfg
    }

    #[test]
    fn init_shapes_and_zero_gate() {
        let m = DualModalModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.params.get("ct.conv3.weight").unwrap().shape(), &[32, 16, 3, 3]);
        assert_eq!(m.params.get("he.attn.v").unwrap().shape(), &[16, 32]);
        assert_eq!(m.params.get("meta.fc1.weight").unwrap().shape(), &[64, 3]);
        assert!(m.params.get("gate.weight").unwrap().values().iter().all(|&v| v == 0.0));
        let again = DualModalModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        assert_eq!(m, again);
        assert!(DualModalModel::from_parts(m.config.clone(), m.params.clone()).is_ok());
    }

    #[test]
    fn zero_gate_is_even_split() {
        let m = DualModalModel::<f64>::init(tiny(), 3).unwrap();
        let w = gate_weights(&m, &ClinicalEmbedding(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!((w.w_ct, w.w_he), (0.5, 0.5));
    }

    #[test]
    fn gate_log_two_bias() {
        let mut m = DualModalModel::<f64>::init(tiny(), 3).unwrap();
        m.params.get_mut("gate.bias").unwrap().values_mut()[0] = 2f64.ln();
        let w = gate_weights(&m, &ClinicalEmbedding(vec![0.0; 3])).unwrap();
        assert!((w.w_ct - 2.0 / 3.0).abs() < 1e-12 && (w.w_he - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_examples() {
        let zc = Logits(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let zh = Logits(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let z = fuse_logits(&zc, &zh, &ModalityWeights::new(0.3, 0.7).unwrap()).unwrap();
        assert_eq!(z.0, vec![0.3, 0.7, 0.0, 0.0, 0.0]);
        let z = fuse_logits(&zc, &zh, &ModalityWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(z, zc);
        assert!(fuse_logits(&zc, &Logits(vec![0.0; 4]), &ModalityWeights::new(0.5, 0.5).unwrap()).is_err());
        assert!(ModalityWeights::new(0.6, 0.6).is_err());
    }

    #[test]
    fn proba_examples() {
        assert!(predict_proba(&Logits(vec![0.0; 5]))
            .iter()
            .all(|&p| (p - 0.2).abs() < 1e-15));
        let p = predict_proba(&Logits(vec![4f64.ln(), 0.0, 0.0, 0.0, 0.0]));
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.125).abs() < 1e-12);
        let z = vec![0.3, -1.0, 2.0, 0.1, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 10.0).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn zero_head_gives_bias() {
        let mut m = DualModalModel::<f64>::init(tiny(), 5).unwrap();
        for v in m.params.get_mut("ct.head.weight").unwrap().values_mut() {
            *v = 0.0;
        }
        m.params
            .get_mut("ct.head.bias")
            .unwrap()
            .values_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let patch = CtPatch::new(
            16,
            16,
            (0..256).map(|i| (i % 7) as f32 / 7.0).collect(),
            vec![false; 256],
        )
        .unwrap();
        let (_, z) = ct_forward(&m, &patch, Mode::Eval).unwrap();
        assert_eq!(z.0, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let (_, z2) = ct_forward(&m, &patch, Mode::Eval).unwrap();
        assert_eq!(z, z2);
        let bad = CtPatch::new(8, 8, vec![0.0; 64], vec![false; 64]).unwrap();
        assert!(ct_forward(&m, &bad, Mode::Eval).is_err());
    }

    #[test]
    fn bag_attention_cases() {
        let m = DualModalModel::<f64>::init(tiny(), 9).unwrap();
        let tile = |k: usize| RgbTile::new(8, 8, (0..192).map(|i| ((i * k) % 11) as f32 / 11.0).collect()).unwrap();
        let (a, _, _) = he_forward(&m, &[tile(3)], Mode::Eval).unwrap();
        assert_eq!(a.0, vec![1.0]);
        let (a, _, _) = he_forward(&m, &[tile(3), tile(3), tile(3)], Mode::Eval).unwrap();
        assert!(a.0.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(matches!(he_forward(&m, &[], Mode::Eval), Err(Error::EmptyBag)));
    }

    #[test]
    fn metadata_rejects_raw_values() {
        let m = DualModalModel::<f64>::init(tiny(), 2).unwrap();
        let ok = MetadataVector {
            age_z: 0.5,
            sex: 1,
            smoking: 2,
            standardized: [0.5, 1.0, 1.2],
        };
        let a = metadata_encode(&m, &ok, Mode::Eval).unwrap();
        assert_eq!(a.0.len(), 3);
        assert_eq!(a, metadata_encode(&m, &ok, Mode::Eval).unwrap());
        let raw = MetadataVector {
            standardized: [65.0, 1.0, 2.0],
            ..ok
        };
        assert!(metadata_encode(&m, &raw, Mode::Eval).is_err());
        let bad_code = MetadataVector { smoking: 3, ..ok };
        assert!(metadata_encode(&m, &bad_code, Mode::Eval).is_err());
    }

    #[test]
    fn zero_mlp_embeds_to_zero() {
        let mut m = DualModalModel::<f64>::init(tiny(), 2).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("meta.") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let v = MetadataVector {
            age_z: 1.0,
            sex: 0,
            smoking: 1,
            standardized: [1.0, -1.0, 0.3],
        };
        assert!(metadata_encode(&m, &v, Mode::Eval).unwrap().0.iter().all(|&x| x == 0.0));
    }
}
