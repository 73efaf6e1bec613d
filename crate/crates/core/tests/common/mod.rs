#![allow(dead_code)]

use lungfuse::attribution::{Explainable, Forward};
use lungfuse::autodiff::{Real, Tape, Tensor, Var};
use lungfuse::error::Result;
use lungfuse::model::{BranchConfig, ModelConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    lungfuse::seed::rng(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).unwrap()
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A soft target distribution per row.
pub fn soft_targets(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor<f64> {
    let mut v = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = r.iter().sum();
        v.extend(r.into_iter().map(|x| x / s));
    }
    Tensor::new(vec![rows, k], v).unwrap()
}

/// Tiny architecture for exhaustive gradient checks.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        ct: BranchConfig {
            image_size: 8,
            channels: vec![2, 3],
            ..BranchConfig::ct_default()
        },
        tile: BranchConfig {
            image_size: 4,
            channels: vec![2, 2],
            ..BranchConfig::tile_default()
        },
        attention_hidden: 3,
        meta_hidden: vec![4, 3],
        ..ModelConfig::default()
    }
}

/// Linear scorer `z_k = Σ w_k ⊙ x + b_k` over `(C, H, W)` images.
pub struct LinearScorer {
    pub shape: [usize; 3],
    /// `(K, C·H·W)`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl<T: Real> Explainable<T> for LinearScorer {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let n = tape.value(x).shape()[0];
        let d: usize = self.shape.iter().product();
        let k = self.weights.len();
        let flat = tape.reshape(x, &[n, d])?;
        let w = tape.constant(Tensor::from_f64(&[k, d], &self.weights.concat())?);
        let b = tape.constant(Tensor::from_f64(&[k], &self.bias)?);
        let logits = tape.dense(flat, w, Some(b))?;
        Ok(Forward {
            logits,
            layers: Vec::new(),
        })
    }
}

/// Toy conv net: one conv layer `(F, C, 3, 3)` with padding 1, ReLU,
/// global average pool and a dense head. The post-ReLU map is exposed as
/// layer `conv`.
pub struct ToyConvNet {
    pub shape: [usize; 3],
    pub conv_w: Tensor<f64>,
    pub conv_b: Tensor<f64>,
    pub head_w: Tensor<f64>,
    pub head_b: Tensor<f64>,
}

impl ToyConvNet {
    pub fn random(seed: u64, shape: [usize; 3], filters: usize, classes: usize) -> Self {
        let mut r = rng(seed);
        Self {
            shape,
            conv_w: normal_tensor(&mut r, &[filters, shape[0], 3, 3], 0.5),
            conv_b: normal_tensor(&mut r, &[filters], 0.1),
            head_w: normal_tensor(&mut r, &[classes, filters], 1.0),
            head_b: normal_tensor(&mut r, &[classes], 0.1),
        }
    }
}

impl<T: Real> Explainable<T> for ToyConvNet {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.head_w.shape()[0]
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let w = tape.constant(self.conv_w.cast());
        let b = tape.constant(self.conv_b.cast());
        let hw = tape.constant(self.head_w.cast());
        let hb = tape.constant(self.head_b.cast());
        let a = tape.conv2d(x, w, Some(b), 1, 1)?;
        let a = tape.relu(a)?;
        let p = tape.global_avg_pool(a)?;
        let logits = tape.dense(p, hw, Some(hb))?;
        Ok(Forward {
            logits,
            layers: vec![("conv".into(), a)],
        })
    }
}
