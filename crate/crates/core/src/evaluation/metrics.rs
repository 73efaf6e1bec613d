use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.0[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.0.iter().map(|r| r[c]).sum()
    }

    /// CSV with a header row and one row per true class.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(class_names.iter().map(|s| s.to_string()));
        w.write_record(&header).expect("in-memory write");
        for (name, row) in class_names.iter().zip(&self.0) {
            let mut rec = vec![name.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Mean F1 over the classes that occur among labels or predictions.
    pub macro_f1: f64,
    /// Classes absent from both labels and predictions.
    pub absent_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_and_metrics(predictions: &[usize], labels: &[usize]) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "confusion_and_metrics",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES || l >= NUM_CLASSES {
            return Err(Error::invalid(format!(
                "class id out of range: label {l}, prediction {p}"
            )));
        }
        m[l][p] += 1;
    }
    let cm = ConfusionMatrix(m);
    let per_class: Vec<ClassMetrics> = (0..NUM_CLASSES)
        .map(|c| {
            let tp = cm.0[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let present: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&c| cm.row_sum(c) + cm.col_sum(c) > 0)
        .collect();
    let absent_classes = (0..NUM_CLASSES).filter(|c| !present.contains(c)).collect();
    let macro_f1 = present.iter().map(|&c| per_class[c].f1).sum::<f64>() / present.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: ratio(cm.trace(), cm.total()),
        confusion: cm,
        per_class,
        macro_f1,
        absent_classes,
    })
}

pub(crate) fn check_probability_rows(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "probabilities",
            format!("{} rows vs {} labels", probabilities.len(), labels.len()),
        ));
    }
    for (i, row) in probabilities.iter().enumerate() {
        if row.len() != NUM_CLASSES
            || row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p))
            || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid(format!(
                "row {i} is not a probability distribution: {row:?}"
            )));
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {l} out of range")));
    }
    Ok(())
}

/// Multiclass Brier score: mean of `Σ_k (p_k − y_k)²`, in `[0, 2]`.
pub fn brier_score(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probability_rows(probabilities, labels)?;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(row, &l)| {
            row.iter()
                .enumerate()
                .map(|(k, &p)| (p - f64::from(u8::from(k == l))).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let l = [0, 1, 2, 3, 4, 4];
        let m = confusion_and_metrics(&l, &l).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert!(m.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0));
        assert_eq!(m.confusion.0[4][4], 2);
    }

    #[test]
    fn hand_counted_case() {
        let m = confusion_and_metrics(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
        let (c0, c1) = (m.per_class[0], m.per_class[1]);
        assert_eq!((c0.precision, c0.recall), (1.0, 0.5));
        assert_eq!((c1.precision, c1.recall), (0.5, 1.0));
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15 && (c1.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.absent_classes, vec![2, 3, 4]);
        assert!(confusion_and_metrics(&[], &[]).is_err());
    }

    #[test]
    fn brier_cases() {
        let one_hot = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]];
        assert_eq!(brier_score(&one_hot, &[0]).unwrap(), 0.0);
        assert!((brier_score(&[vec![0.2; 5]], &[3]).unwrap() - 0.8).abs() < 1e-12);
        let p = vec![vec![0.5, 0.5, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0]];
        assert!((brier_score(&p, &[0, 0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(brier_score(&[vec![0.5; 5]], &[0]).is_err());
        assert!(brier_score(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]], &[1]).unwrap() == 2.0);
    }

    #[test]
    fn confusion_csv_layout() {
        let m = confusion_and_metrics(&[0, 1], &[0, 0]).unwrap();
        let csv = m.confusion.to_csv(&crate::model::CLASS_NAMES);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[1].ends_with(",1,1,0,0,0"));
    }

    proptest! {
        #[test]
        fn row_sums_and_trace(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = confusion_and_metrics(&p, &l).unwrap();
            for c in 0..NUM_CLASSES {
                prop_assert_eq!(m.confusion.row_sum(c) as usize, l.iter().filter(|&&x| x == c).count());
            }
            prop_assert_eq!(m.confusion.total() as usize, l.len());
            prop_assert!((m.accuracy - m.confusion.trace() as f64 / l.len() as f64).abs() < 1e-15);
        }

        #[test]
        fn brier_in_range(rows in proptest::collection::vec((proptest::collection::vec(0.0f64..1.0, 5), 0usize..5), 1..40)) {
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for (r, l) in rows {
                let s: f64 = r.iter().sum::<f64>() + 1e-9;
                probs.push(r.iter().map(|v| (v + 1e-9 / 5.0) / s).collect::<Vec<_>>());
                labels.push(l);
            }
            let b = brier_score(&probs, &labels).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
        }
    }
}
