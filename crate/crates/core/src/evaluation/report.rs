use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Stage, CLASS_NAMES, NUM_CLASSES};
use crate::training::{predict_all, Predictions, PreparedPatient};

use super::metrics::{brier_score, confusion_and_metrics};
use super::roc::{auroc_per_class, delong_test, DeLongResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassEntry {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLongClassEntry {
    pub class: String,
    #[serde(flatten)]
    pub result: DeLongResult,
}

/// One-vs-rest DeLong comparison of the evaluated model (`a`) against a
/// baseline (`b`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLongComparison {
    pub model_a: String,
    pub model_b: String,
    pub per_class: Vec<DeLongClassEntry>,
    pub macro_auc_a: f64,
    pub macro_auc_b: f64,
    /// Smallest per-class p-value (uncorrected).
    pub min_p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_sha256: String,
    pub stage: Stage,
    pub seed: u64,
    /// SHA-256 of the sorted, newline-joined test patient ids.
    pub split_id: String,
    pub test_size: usize,
}

/// Full-scale reference values from the clinical study; not measured here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub note: String,
    pub fusion: ReferenceRow,
    pub ct_only: ReferenceRow,
    pub he_only: ReferenceRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub accuracy: f64,
    pub auroc: f64,
    pub macro_f1: f64,
}

impl Default for PublishedReference {
    fn default() -> Self {
        Self {
            note:
                "published full-scale clinical results, recorded for reference only; not comparable to synthetic runs"
                    .into(),
            fusion: ReferenceRow {
                accuracy: 0.87,
                auroc: 0.97,
                macro_f1: 0.88,
            },
            ct_only: ReferenceRow {
                accuracy: 0.84,
                auroc: 0.94,
                macro_f1: 0.84,
            },
            he_only: ReferenceRow {
                accuracy: 0.85,
                auroc: 0.95,
                macro_f1: 0.85,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class: Vec<PerClassEntry>,
    pub macro_f1: f64,
    pub absent_classes: Vec<String>,
    /// `None` when some class is missing from the test labels.
    pub auroc_macro_ovr: Option<f64>,
    pub auroc_per_class: Option<Vec<f64>>,
    pub brier: f64,
    pub delong: Vec<DeLongComparison>,
    pub provenance: Provenance,
    pub published_reference: PublishedReference,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn split_id(ids: &[&str]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sha256_hex(sorted.join("\n").as_bytes())
}

/// One-vs-rest DeLong over every class present in `labels`.
pub fn compare(
    name_a: &str,
    probs_a: &[Vec<f64>],
    name_b: &str,
    probs_b: &[Vec<f64>],
    labels: &[usize],
) -> Result<DeLongComparison> {
    let mut per_class = Vec::new();
    for c in 0..NUM_CLASSES {
        let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if l.iter().all(|&b| b) || !l.iter().any(|&b| b) {
            continue;
        }
        let a: Vec<f64> = probs_a.iter().map(|r| r[c]).collect();
        let b: Vec<f64> = probs_b.iter().map(|r| r[c]).collect();
        per_class.push(DeLongClassEntry {
            class: CLASS_NAMES[c].into(),
            result: delong_test(&a, &b, &l)?,
        });
    }
    if per_class.is_empty() {
        return Err(Error::invalid(
            "DeLong comparison needs at least two classes in the labels",
        ));
    }
    let k = per_class.len() as f64;
    Ok(DeLongComparison {
        model_a: name_a.into(),
        model_b: name_b.into(),
        macro_auc_a: per_class.iter().map(|e| e.result.auc_a).sum::<f64>() / k,
        macro_auc_b: per_class.iter().map(|e| e.result.auc_b).sum::<f64>() / k,
        min_p_value: per_class.iter().map(|e| e.result.p_value).fold(1.0, f64::min),
        per_class,
    })
}

/// Metrics for one probability table plus any comparisons.
pub fn build_report(
    model: &str,
    probabilities: &[Vec<f64>],
    labels: &[usize],
    delong: Vec<DeLongComparison>,
    provenance: Provenance,
) -> Result<MetricsReport> {
    let preds: Vec<usize> = probabilities.iter().map(|p| crate::model::argmax(p)).collect();
    let m = confusion_and_metrics(&preds, labels)?;
    let auroc = auroc_per_class(probabilities, labels).ok();
    Ok(MetricsReport {
        model: model.into(),
        confusion: m.confusion.0.iter().map(|r| r.to_vec()).collect(),
        accuracy: m.accuracy,
        per_class: m
            .per_class
            .iter()
            .zip(CLASS_NAMES)
            .map(|(c, name)| PerClassEntry {
                class: name.into(),
                precision: c.precision,
                recall: c.recall,
                f1: c.f1,
            })
            .collect(),
        macro_f1: m.macro_f1,
        absent_classes: m.absent_classes.iter().map(|&c| CLASS_NAMES[c].to_string()).collect(),
        auroc_macro_ovr: auroc.as_ref().map(|a| a.iter().sum::<f64>() / a.len() as f64),
        auroc_per_class: auroc,
        brier: brier_score(probabilities, labels)?,
        delong,
        provenance,
        published_reference: PublishedReference::default(),
    })
}

/// Probabilities a checkpoint's own stage is responsible for.
pub fn stage_probabilities(stage: Stage, p: &Predictions) -> Result<Vec<Vec<f64>>> {
    let logits = match stage {
        Stage::Ct => &p.ct_logits,
        Stage::He => &p.he_logits,
        Stage::Fusion => &p.fused_logits,
        Stage::Init => return Err(Error::invalid("an untrained checkpoint cannot be evaluated")),
    };
    Ok(Predictions::probabilities(logits))
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Ct => "ct",
        Stage::He => "he",
        Stage::Fusion => "fusion",
        Stage::Init => "init",
    }
}

/// Load a checkpoint, score the test split and compare against each
/// baseline checkpoint with DeLong's test.
pub fn assemble_report(checkpoint: &Path, test: &[PreparedPatient], baselines: &[&Path]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test split has no patients".into()));
    }
    let (model, meta) = load_checkpoint(checkpoint)?;
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let labels: Vec<usize> = test.iter().map(|p| p.label).collect();
    let probs = stage_probabilities(meta.stage, &predict_all(&model, test)?)?;
    let name = stage_name(meta.stage);
    let mut delong = Vec::new();
    for b in baselines {
        let (bm, bmeta) = load_checkpoint(b)?;
        let bp = stage_probabilities(bmeta.stage, &predict_all(&bm, test)?)?;
        delong.push(compare(name, &probs, stage_name(bmeta.stage), &bp, &labels)?);
    }
    let ids: Vec<&str> = test.iter().map(|p| p.id.as_str()).collect();
    let provenance = Provenance {
        checkpoint_sha256: sha256_hex(&bytes),
        stage: meta.stage,
        seed: meta.seed,
        split_id: split_id(&ids),
        test_size: test.len(),
    };
    build_report(name, &probs, &labels, delong, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provenance() -> Provenance {
        Provenance {
            checkpoint_sha256: sha256_hex(b""),
            stage: Stage::Fusion,
            seed: 3,
            split_id: split_id(&["b", "a"]),
            test_size: 10,
        }
    }

    fn one_hot(c: usize) -> Vec<f64> {
        let mut v = vec![0.0; NUM_CLASSES];
        v[c] = 1.0;
        v
    }

    #[test]
    fn perfect_model_report() {
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let probs: Vec<_> = labels.iter().map(|&c| one_hot(c)).collect();
        let uniform = vec![vec![0.2; 5]; 10];
        let cmp = compare("fusion", &probs, "ct", &uniform, &labels).unwrap();
        assert_eq!(cmp.per_class.len(), 5);
        assert!(cmp.per_class.iter().all(|e| (0.0..=1.0).contains(&e.result.p_value)));
        let r = build_report("fusion", &probs, &labels, vec![cmp], provenance()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auroc_macro_ovr, Some(1.0));
        assert_eq!(r.brier, 0.0);
        let json = r.to_json().unwrap();
        assert_eq!(json, r.to_json().unwrap());
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "confusion",
            "accuracy",
            "per_class",
            "macro_f1",
            "auroc_macro_ovr",
            "brier",
            "delong",
            "provenance",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["published_reference"]["fusion"]["accuracy"], 0.87);
        assert!(v["delong"][0]["per_class"][0]["p_value"].is_number());
    }

    #[test]
    fn split_id_ignores_order() {
        assert_eq!(split_id(&["a", "b"]), split_id(&["b", "a"]));
        assert_ne!(split_id(&["a"]), split_id(&["a", "b"]));
    }

    #[test]
    fn missing_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = crate::training::PreparedPatient {
            id: "x".into(),
            label: 0,
            ct: crate::autodiff::Tensor::zeros(&[1, 2, 2]),
            ct_mask: vec![false; 4],
            tiles: crate::autodiff::Tensor::zeros(&[1, 3, 2, 2]),
            kept_tiles: vec![0],
            tile_masks: vec![vec![false; 4]],
            meta: crate::preprocess::MetadataVector {
                age_z: 0.0,
                sex: 0,
                smoking: 0,
                standardized: [0.0; 3],
            },
            corrupted: Default::default(),
        };
        let err = assemble_report(&dir.path().join("none.dsm"), &[p], &[]).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
