//! Staged training: each branch on its own head, then the clinical encoder
//! and gate on the fused loss with both branches frozen.

pub mod data;
pub mod infer;
mod loops;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{prepare_dataset, prepare_patient, prepare_with_stats, stack_images, PreparedDataset, PreparedPatient};
pub use infer::{predict_all, Predictions};
pub use loops::{train_branch, train_fusion, Branch, TrainOutcome};
pub use optim::{adamw_step, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dropout before each branch head.
    pub dropout: f64,
    pub weight_decay: f64,
    /// Epochs without a validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Probability of MixUp (otherwise CutMix) for an augmented batch.
    pub mixup_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            dropout: 0.5,
            weight_decay: 1e-4,
            patience: 10,
            seed: 0,
            augment: true,
            mixup_alpha: 0.2,
            cutmix_alpha: 1.0,
            mixup_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be nonnegative"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("batch size and patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.mixup_prob) {
            return Err(Error::invalid("dropout must lie in [0,1) and mixup_prob in [0,1]"));
        }
        if !(self.mixup_alpha > 0.0 && self.cutmix_alpha > 0.0) {
            return Err(Error::invalid("mixing alphas must be positive"));
        }
        Ok(())
    }
}

/// `−Σ t_k ln(p_k + 1e-12)` for a probability vector and a soft target.
pub fn cross_entropy(probabilities: &[f64], target: &[f64]) -> Result<f64> {
    if probabilities.len() != target.len() || target.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} probabilities vs {} targets", probabilities.len(), target.len()),
        ));
    }
    for (what, v) in [("probabilities", probabilities), ("target", target)] {
        if v.iter().any(|&x| !(x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what} {v:?} is not a distribution")));
        }
    }
    Ok(-probabilities
        .iter()
        .zip(target)
        .map(|(&p, &t)| t * (p + 1e-12).ln())
        .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History(pub Vec<EpochRecord>);

impl History {
    pub fn best_epoch(&self) -> Option<usize> {
        self.0.iter().find(|r| r.is_best).map(|r| r.epoch)
    }

    /// Flag the epoch [`EarlyStopper`] keeps: highest validation macro-F1,
    /// ties broken by lower validation loss, then by the earlier epoch.
    pub fn mark_best(&mut self) {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, r) in self.0.iter().enumerate() {
            if best.is_none_or(|(_, f, l)| beats(r.val_macro_f1, r.val_loss, f, l)) {
                best = Some((i, r.val_macro_f1, r.val_loss));
            }
        }
        for (i, r) in self.0.iter_mut().enumerate() {
            r.is_best = best.is_some_and(|(b, _, _)| b == i);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.0 {
            w.serialize(r).expect("in-memory write");
        }
        if self.0.is_empty() {
            w.write_record(["epoch", "train_loss", "val_loss", "val_macro_f1", "is_best"])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

fn beats(score: f64, loss: f64, best_score: f64, best_loss: f64) -> bool {
    score > best_score || (score == best_score && loss < best_loss)
}

/// Stops once `patience` consecutive epochs fail to beat the best
/// validation macro-F1. An equal macro-F1 with a lower validation loss
/// counts as an improvement, so a plateau in the discrete score does not
/// stop a run whose loss is still falling.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, score: f64, loss: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b, l)| beats(score, loss, b, l));
        if improved {
            self.best = Some((epoch, score, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.learning_rate, c.batch_size, c.max_epochs, c.dropout, c.weight_decay),
            (1e-4, 32, 50, 0.5, 1e-4)
        );
        assert_eq!(c.patience, 10);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap().abs() < 1e-9);
        assert!((cross_entropy(&[0.2; 5], &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap() - 5f64.ln()).abs() < 1e-9);
        let mixed = cross_entropy(&[0.5, 0.25, 0.25], &[0.6, 0.4, 0.0]).unwrap();
        let oracle = 0.6 * (1.0f64 / 0.5).ln() + 0.4 * (1.0f64 / 0.25).ln();
        assert!((mixed - oracle).abs() < 1e-9 && (mixed - 0.97041).abs() < 1e-5);
        assert!(cross_entropy(&[0.5, 0.6], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[-1.0, 2.0]).is_err());
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut s = EarlyStopper::new(1);
        let scores = [0.5, 0.4, 0.3, 0.2];
        let mut ran = 0;
        for (e, &f) in scores.iter().enumerate() {
            ran += 1;
            if s.update(e + 1, f, 1.0).stop {
                break;
            }
        }
        assert_eq!(ran, 2);
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn best_is_argmax_not_last() {
        let mut s = EarlyStopper::new(3);
        for (e, f) in [0.2, 0.6, 0.6, 0.5, 0.55].into_iter().enumerate() {
            let d = s.update(e + 1, f, 1.0);
            assert_eq!(d.stop, e == 4);
        }
        assert_eq!(s.best_epoch(), Some(2));
        let mut h = History(
            [0.2, 0.6, 0.6, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &f)| EpochRecord {
                    epoch: i + 1,
                    train_loss: 1.0,
                    val_loss: 1.0,
                    val_macro_f1: f,
                    is_best: false,
                })
                .collect(),
        );
        h.mark_best();
        assert_eq!(h.best_epoch(), Some(2));
        assert!(h
            .to_csv()
            .starts_with("epoch,train_loss,val_loss,val_macro_f1,is_best\n1,1.0,1.0,0.2,false\n"));
    }

    #[test]
    fn equal_score_with_lower_loss_improves() {
        let mut s = EarlyStopper::new(2);
        let runs = [(0.5, 1.0), (0.5, 0.8), (0.5, 0.9), (0.5, 0.7), (0.4, 0.1), (0.5, 0.7)];
        let mut stopped_at = None;
        for (e, &(f, l)) in runs.iter().enumerate() {
            if s.update(e + 1, f, l).stop {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch(), Some(4));
        let mut h = History(
            runs.iter()
                .enumerate()
                .map(|(i, &(f, l))| EpochRecord {
                    epoch: i + 1,
                    train_loss: 1.0,
                    val_loss: l,
                    val_macro_f1: f,
                    is_best: false,
                })
                .collect(),
        );
        h.mark_best();
        assert_eq!(h.best_epoch(), Some(4));
    }
}
