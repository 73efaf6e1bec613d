//! Tape-level builders for every sub-network. Parameters are looked up by
//! name in the bindings produced by [`ParamSet::bind`](crate::autodiff::ParamSet::bind).

use std::collections::BTreeMap;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

use super::config::{BranchConfig, ModelConfig};

pub type Bindings = BTreeMap<String, Var>;

/// Forward mode. Dropout is active only in `Train`, with masks drawn from
/// sub-seeds of `seed` named after the dropout site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn site_seed(self, site: &str) -> Option<u64> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed } => Some(seed::derive(seed, site)),
        }
    }

    /// Independent mode for the `index`-th item of a batch.
    pub fn indexed(self, index: usize) -> Self {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train {
                seed: seed::derive_indexed(seed, "item", index as u64),
            },
        }
    }
}

pub fn param(vars: &Bindings, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("parameter `{name}` missing from model")))
}

/// Output of a convolutional branch.
#[derive(Clone, Debug)]
pub struct BranchVars {
    /// `(N, D)` pooled features before dropout.
    pub features: Var,
    /// `(N, K)`.
    pub logits: Var,
    /// Post-ReLU, pre-pool activation of every conv block.
    pub activations: Vec<Var>,
}

/// Conv stack + global average pool: `(N, C, H, W)` → `(N, D)`.
pub fn encoder<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    prefix: &str,
    cfg: &BranchConfig,
    x: Var,
    activations: &mut Vec<Var>,
) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.channels.len() {
        let w = param(vars, &format!("{prefix}.conv{}.weight", i + 1))?;
        let b = param(vars, &format!("{prefix}.conv{}.bias", i + 1))?;
        let c = tape.conv2d(h, w, Some(b), 1, cfg.kernel / 2)?;
        let a = tape.relu(c)?;
        activations.push(a);
        h = tape.maxpool2d(a, cfg.pool)?;
    }
    tape.global_avg_pool(h)
}

/// Dropout followed by the dense classification head.
pub fn head<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    prefix: &str,
    cfg: &BranchConfig,
    features: Var,
    mode: Mode,
) -> Result<Var> {
    let d = tape.dropout(features, cfg.dropout, mode.site_seed(&format!("{prefix}.dropout")))?;
    let w = param(vars, &format!("{prefix}.head.weight"))?;
    let b = param(vars, &format!("{prefix}.head.bias"))?;
    tape.dense(d, w, Some(b))
}

/// CT branch on a `(N, 1, H, W)` batch.
pub fn ct_branch<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    cfg: &ModelConfig,
    x: Var,
    mode: Mode,
) -> Result<BranchVars> {
    let mut activations = Vec::new();
    let features = encoder(tape, vars, "ct", &cfg.ct, x, &mut activations)?;
    let logits = head(tape, vars, "ct", &cfg.ct, features, mode)?;
    Ok(BranchVars {
        features,
        logits,
        activations,
    })
}

#[derive(Clone, Debug)]
pub struct BagVars {
    /// `(n, D)` tile embeddings.
    pub embeddings: Var,
    /// `(1, n)`.
    pub attention: Var,
    /// `(1, D)` attention-weighted embedding.
    pub features: Var,
    /// `(1, K)`.
    pub logits: Var,
    /// Tile-encoder activations, each `(n, C, h, w)`.
    pub activations: Vec<Var>,
}

/// Attention pooling over `(n, D)` embeddings: `a = softmax(wᵀ tanh(V h))`,
/// `f = Σ aᵢ hᵢ`. Returns `(attention (1,n), features (1,D))`.
pub fn attention_pool<T: Real>(tape: &mut Tape<T>, vars: &Bindings, embeddings: Var) -> Result<(Var, Var)> {
    let n = tape.value(embeddings).shape()[0];
    let v = param(vars, "he.attn.v")?;
    let w = param(vars, "he.attn.w")?;
    let u = tape.dense(embeddings, v, None)?;
    let u = tape.tanh(u)?;
    let s = tape.dense(u, w, None)?;
    let s = tape.reshape(s, &[1, n])?;
    let a = tape.softmax(s)?;
    let f = tape.matmul(a, embeddings)?;
    Ok((a, f))
}

/// H&E branch on one bag of `(n, 3, h, w)` tiles.
pub fn he_branch<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    cfg: &ModelConfig,
    tiles: Var,
    mode: Mode,
) -> Result<BagVars> {
    let mut activations = Vec::new();
    let embeddings = encoder(tape, vars, "he", &cfg.tile, tiles, &mut activations)?;
    let (attention, features) = attention_pool(tape, vars, embeddings)?;
    let logits = head(tape, vars, "he", &cfg.tile, features, mode)?;
    Ok(BagVars {
        embeddings,
        attention,
        features,
        logits,
        activations,
    })
}

/// Clinical MLP: `(B, 3)` → `(B, E)`, ReLU and dropout after every layer.
pub fn metadata_mlp<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    cfg: &ModelConfig,
    m: Var,
    mode: Mode,
) -> Result<Var> {
    let mut h = m;
    for i in 0..cfg.meta_hidden.len() {
        let w = param(vars, &format!("meta.fc{}.weight", i + 1))?;
        let b = param(vars, &format!("meta.fc{}.bias", i + 1))?;
        h = tape.dense(h, w, Some(b))?;
        h = tape.relu(h)?;
        h = tape.dropout(h, cfg.meta_dropout, mode.site_seed(&format!("meta.dropout{}", i + 1)))?;
    }
    Ok(h)
}

/// Gate: `(B, E)` → `(B, 2)` modality weights `(w_ct, w_he)`.
pub fn gate<T: Real>(tape: &mut Tape<T>, vars: &Bindings, e: Var) -> Result<Var> {
    let w = param(vars, "gate.weight")?;
    let b = param(vars, "gate.bias")?;
    let g = tape.dense(e, w, Some(b))?;
    tape.softmax(g)
}

/// Per-row convex combination `w_ct·z_ct + w_he·z_he` for `(B, K)` logits
/// and `(B, 2)` weights.
pub fn fuse<T: Real>(tape: &mut Tape<T>, z_ct: Var, z_he: Var, w: Var) -> Result<Var> {
    let shape = tape.value(z_ct).shape().to_vec();
    if shape.len() != 2 || tape.value(z_he).shape() != shape.as_slice() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", shape, tape.value(z_he).shape()),
        ));
    }
    let (b, k) = (shape[0], shape[1]);
    if tape.value(w).shape() != [b, 2] {
        return Err(Error::shape(
            "fuse",
            format!("weights {:?} for batch {b}", tape.value(w).shape()),
        ));
    }
    let stacked = tape.concat(&[z_ct, z_he], 1)?;
    let stacked = tape.reshape(stacked, &[b, 2, k])?;
    let w3 = tape.reshape(w, &[b, 1, 2])?;
    let z = tape.matmul(w3, stacked)?;
    tape.reshape(z, &[b, k])
}

/// Mean soft-target cross-entropy of `(B, K)` logits:
/// `−(1/B) Σ_b Σ_k t_bk · ln(softmax(z)_bk + 1e-12)`.
pub fn cross_entropy_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: Tensor<T>) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if targets.shape() != shape.as_slice() || shape.len() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs targets {:?}", targets.shape()),
        ));
    }
    let p = tape.softmax(logits)?;
    let eps = tape.constant(Tensor::full(&shape, T::of(1e-12)));
    let p = tape.add(p, eps)?;
    let lp = tape.log(p)?;
    let t = tape.constant(targets);
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / shape[0] as f64)
}
