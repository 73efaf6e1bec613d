use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::confusion_and_metrics;
use crate::model::graph::{self, Bindings};
use crate::model::{argmax, softmax, DualModalModel, Mode, NUM_CLASSES};
use crate::preprocess::{cutmix, mixup, Sample};
use crate::seed;

use super::data::{stack_images, PreparedDataset, PreparedPatient};
use super::infer::{ct_logits, fuse_rows, gate_outputs, he_logits, metadata_tensor};
use super::optim::{adamw_step, OptimizerState};
use super::{cross_entropy, EarlyStopper, EpochRecord, History, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Ct,
    He,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Ct => "ct",
            Branch::He => "he",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: DualModalModel<f32>,
    pub history: History,
    pub best_epoch: Option<usize>,
}

fn one_hot(label: usize) -> Vec<f32> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[label] = 1.0;
    v
}

fn targets(labels: &[Vec<f32>]) -> Result<Tensor<f32>> {
    Tensor::new(vec![labels.len(), NUM_CLASSES], labels.concat())
}

/// Mean cross-entropy and macro-F1 of logits against hard labels.
fn score(logits: &[Vec<f64>], patients: &[PreparedPatient]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    for (z, p) in logits.iter().zip(patients) {
        let t: Vec<f64> = one_hot(p.label).into_iter().map(f64::from).collect();
        loss += cross_entropy(&softmax(z), &t)?;
    }
    let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let labels: Vec<usize> = patients.iter().map(|p| p.label).collect();
    Ok((
        loss / patients.len() as f64,
        confusion_and_metrics(&preds, &labels)?.macro_f1,
    ))
}

/// MixUp (probability `mixup_prob`) or CutMix against a shuffled copy of the
/// batch. Pairs whose images differ in shape mix with themselves.
fn augment(samples: Vec<Sample>, cfg: &TrainConfig, step_seed: u64) -> Result<Vec<Sample>> {
    let mut rng = seed::rng(seed::derive(step_seed, "augment"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let partners: Vec<Sample> = order
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            if samples[j].image.shape() == samples[i].image.shape() {
                samples[j].clone()
            } else {
                samples[i].clone()
            }
        })
        .collect();
    let mix_seed = seed::derive(step_seed, "mix");
    let (out, _) = if rng.random::<f64>() < cfg.mixup_prob {
        mixup(&samples, &partners, cfg.mixup_alpha, mix_seed)?
    } else {
        cutmix(&samples, &partners, cfg.cutmix_alpha, mix_seed)?
    };
    Ok(out)
}

fn branch_logits_graph(
    branch: Branch,
    tape: &mut Tape<f32>,
    vars: &Bindings,
    model: &DualModalModel<f32>,
    samples: &[Sample],
    mode: Mode,
) -> Result<Var> {
    match branch {
        Branch::Ct => {
            let x = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let xv = tape.constant(x);
            Ok(graph::ct_branch(tape, vars, &model.config, xv, mode)?.logits)
        }
        Branch::He => {
            let mut zs = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let tv = tape.constant(s.image.clone());
                zs.push(graph::he_branch(tape, vars, &model.config, tv, mode.indexed(i))?.logits);
            }
            tape.concat(&zs, 0)
        }
    }
}

fn sgd_step(
    tape: &Tape<f32>,
    loss: Var,
    vars: &Bindings,
    trainable: impl Fn(&str) -> bool,
    params: &mut ParamSet<f32>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let value = f64::from(tape.value(loss).item());
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let named: std::collections::BTreeMap<_, _> = grads.named(vars).into_iter().filter(|(k, _)| trainable(k)).collect();
    adamw_step(params, &named, state, cfg)?;
    Ok(value)
}

/// Train one branch on its own head. Only parameters under the branch
/// prefix change; the returned model holds the best-validation snapshot.
pub fn train_branch(
    branch: Branch,
    init: DualModalModel<f32>,
    data: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptySplit("training needs train and validation patients".into()));
    }
    let prefix = format!("{}.", branch.prefix());
    let trainable = |name: &str| name.starts_with(&prefix);
    let tag = branch.prefix();
    let mut model = init;
    let mut best = model.params.clone();
    let mut state = OptimizerState::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = History::default();
    let mut step = 0u64;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            cfg.seed,
            &format!("{tag}/shuffle"),
            epoch as u64,
        )));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = seed::derive_indexed(cfg.seed, &format!("{tag}/step"), step);
            step += 1;
            let mut samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let p = &data.train[i];
                    let image = match branch {
                        Branch::Ct => p.ct.clone(),
                        Branch::He => p.tiles.clone(),
                    };
                    Sample {
                        image,
                        label: one_hot(p.label),
                    }
                })
                .collect();
            if cfg.augment {
                samples = augment(samples, cfg, step_seed)?;
            }
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, trainable);
            let z = branch_logits_graph(
                branch,
                &mut tape,
                &vars,
                &model,
                &samples,
                Mode::Train { seed: step_seed },
            )?;
            let t = targets(&samples.iter().map(|s| s.label.clone()).collect::<Vec<_>>())?;
            let loss = graph::cross_entropy_loss(&mut tape, z, t)?;
            total += sgd_step(&tape, loss, &vars, trainable, &mut model.params, &mut state, cfg)? * chunk.len() as f64;
        }
        let val_logits = match branch {
            Branch::Ct => ct_logits(&model, &data.val)?,
            Branch::He => he_logits(&model, &data.val)?.0,
        };
        let (val_loss, val_f1) = score(&val_logits, &data.val)?;
        history.0.push(EpochRecord {
            epoch,
            train_loss: total / data.train.len() as f64,
            val_loss,
            val_macro_f1: val_f1,
            is_best: false,
        });
        let d = stopper.update(epoch, val_f1, val_loss);
        if d.improved {
            best = model.params.clone();
        }
        if d.stop {
            break;
        }
    }
    history.mark_best();
    model.params = best;
    Ok(TrainOutcome {
        model,
        best_epoch: history.best_epoch(),
        history,
    })
}

fn is_fusion_param(name: &str) -> bool {
    name.starts_with("meta.") || name.starts_with("gate.")
}

/// Train the clinical encoder and gate on the fused loss. Branch parameters
/// are taken from the two branch models and never updated; metadata and
/// gate parameters start from `init`.
pub fn train_fusion(
    ct_model: &DualModalModel<f32>,
    he_model: &DualModalModel<f32>,
    init: DualModalModel<f32>,
    data: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ct_model.config != he_model.config || ct_model.config != init.config {
        return Err(Error::invalid(
            "branch checkpoints were trained with different model configs",
        ));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptySplit(
            "fusion training needs train and validation patients".into(),
        ));
    }
    let mut params = ct_model.params.with_prefix("ct.");
    params.merge(&he_model.params.with_prefix("he."));
    params.merge(&init.params.with_prefix("meta."));
    params.merge(&init.params.with_prefix("gate."));
    let mut model = DualModalModel::from_parts(init.config.clone(), params)?;

    // Frozen branches: their logits never change, so compute them once.
    let branch_logits = |ps: &[PreparedPatient]| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        Ok((ct_logits(&model, ps)?, he_logits(&model, ps)?.0))
    };
    let (train_ct, train_he) = branch_logits(&data.train)?;
    let (val_ct, val_he) = branch_logits(&data.val)?;

    let mut best = model.params.clone();
    let mut state = OptimizerState::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = History::default();
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            cfg.seed,
            "fusion/shuffle",
            epoch as u64,
        )));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = seed::derive_indexed(cfg.seed, "fusion/step", step);
            step += 1;
            let b = chunk.len();
            let batch: Vec<PreparedPatient> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let zc: Vec<f64> = chunk.iter().flat_map(|&i| train_ct[i].clone()).collect();
            let zh: Vec<f64> = chunk.iter().flat_map(|&i| train_he[i].clone()).collect();
            let labels: Vec<Vec<f32>> = batch.iter().map(|p| one_hot(p.label)).collect();

            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, is_fusion_param);
            let m = tape.constant(metadata_tensor(&batch)?);
            let e = graph::metadata_mlp(&mut tape, &vars, &model.config, m, Mode::Train { seed: step_seed })?;
            let w = graph::gate(&mut tape, &vars, e)?;
            let zc = tape.constant(Tensor::from_f64(&[b, NUM_CLASSES], &zc)?);
            let zh = tape.constant(Tensor::from_f64(&[b, NUM_CLASSES], &zh)?);
            let z = graph::fuse(&mut tape, zc, zh, w)?;
            let loss = graph::cross_entropy_loss(&mut tape, z, targets(&labels)?)?;
            total += sgd_step(&tape, loss, &vars, is_fusion_param, &mut model.params, &mut state, cfg)? * b as f64;
        }
        let gate = gate_outputs(&model, &data.val)?;
        let (val_loss, val_f1) = score(&fuse_rows(&val_ct, &val_he, &gate), &data.val)?;
        history.0.push(EpochRecord {
            epoch,
            train_loss: total / data.train.len() as f64,
            val_loss,
            val_macro_f1: val_f1,
            is_best: false,
        });
        let d = stopper.update(epoch, val_f1, val_loss);
        if d.improved {
            best = model.params.clone();
        }
        if d.stop {
            break;
        }
    }
    history.mark_best();
    model.params = best;
    Ok(TrainOutcome {
        model,
        best_epoch: history.best_epoch(),
        history,
    })
}
