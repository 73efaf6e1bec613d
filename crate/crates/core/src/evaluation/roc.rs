use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

use super::metrics::check_probability_rows;

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn split_by_label(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores contain NaN".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("AUROC needs both positive and negative labels"));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUROC: mean over (positive, negative) pairs of
/// `[s_pos > s_neg] + ½[s_pos = s_neg]`.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_by_label(scores, labels)?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let ranks = midranks(&all);
    let r_pos: f64 = ranks[..pos.len()].iter().sum();
    Ok((r_pos - m * (m + 1.0) / 2.0) / (m * n))
}

/// Unweighted mean of one-vs-rest AUROCs over all five classes.
pub fn auroc_macro_ovr(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(auroc_per_class(probabilities, labels)?.iter().sum::<f64>() / NUM_CLASSES as f64)
}

pub fn auroc_per_class(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    check_probability_rows(probabilities, labels)?;
    let missing: Vec<usize> = (0..NUM_CLASSES).filter(|c| !labels.contains(c)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass(missing));
    }
    (0..NUM_CLASSES)
        .map(|c| {
            let s: Vec<f64> = probabilities.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auroc_binary(&s, &l)
        })
        .collect()
}

/// Per-sample structural components: `V10` for each positive and `V01` for
/// each negative; both average to the AUROC.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralComponents {
    pub auc: f64,
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

pub fn structural_components(scores: &[f64], labels: &[bool]) -> Result<StructuralComponents> {
    let (pos, neg) = split_by_label(scores, labels)?;
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let tz = midranks(&all);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    Ok(StructuralComponents { auc, v10, v01 })
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Variance of `AUC_a − AUC_b` from the structural components of both
/// score vectors on the same samples.
pub fn delong_variance(a: &StructuralComponents, b: &StructuralComponents) -> f64 {
    let (m, n) = (a.v10.len() as f64, a.v01.len() as f64);
    let s10 = covariance(&a.v10, &a.v10) + covariance(&b.v10, &b.v10) - 2.0 * covariance(&a.v10, &b.v10);
    let s01 = covariance(&a.v01, &a.v01) + covariance(&b.v01, &b.v01) - 2.0 * covariance(&a.v01, &b.v01);
    (s10 / m + s01 / n).max(0.0)
}

/// Two-sided p-value of a standard-normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z.abs())).min(1.0)
}

/// DeLong test for two correlated AUROCs.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLongResult> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::shape(
            "delong_test",
            format!(
                "{} / {} scores vs {} labels",
                scores_a.len(),
                scores_b.len(),
                labels.len()
            ),
        ));
    }
    let a = structural_components(scores_a, labels)?;
    let b = structural_components(scores_b, labels)?;
    let variance = delong_variance(&a, &b);
    let (z, p_value, degenerate) = if variance < 1e-12 {
        (0.0, 1.0, true)
    } else {
        let z = (a.auc - b.auc) / variance.sqrt();
        (z, two_sided_p(z), false)
    };
    Ok(DeLongResult {
        auc_a: a.auc,
        auc_b: b.auc,
        variance,
        z,
        p_value,
        degenerate,
    })
}

/// One-vs-rest DeLong test for every class.
pub fn delong_ovr(probs_a: &[Vec<f64>], probs_b: &[Vec<f64>], labels: &[usize]) -> Result<Vec<DeLongResult>> {
    check_probability_rows(probs_a, labels)?;
    check_probability_rows(probs_b, labels)?;
    (0..NUM_CLASSES)
        .map(|c| {
            let a: Vec<f64> = probs_a.iter().map(|r| r[c]).collect();
            let b: Vec<f64> = probs_b.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            delong_test(&a, &b, &l)
        })
        .collect()
}
