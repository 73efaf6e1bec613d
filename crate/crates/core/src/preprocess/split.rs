//! Stratified patient-level train/val/test partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.10, 0.20];

/// Patient id → split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment(pub BTreeMap<String, Split>);

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.0.get(id).copied()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|&&s| s == split).count()
    }

    /// Ids that appear under more than one split across `others`.
    pub fn leaked_ids<'a>(lists: impl IntoIterator<Item = &'a [String]>) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dup = BTreeSet::new();
        for list in lists {
            let uniq: BTreeSet<&String> = list.iter().collect();
            for id in uniq {
                if !seen.insert(id.clone()) {
                    dup.insert(id.clone());
                }
            }
        }
        dup.into_iter().collect()
    }
}

/// Per-class split counts: every cell is the floor or ceiling of its
/// quota, rows sum to the class size and column sums are the floor or
/// ceiling of the global quota. Among valid tables the one placing rounding
/// units on the largest fractional parts wins; ties go to the first found.
fn stratified_counts(class_sizes: &[usize], ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let n: usize = class_sizes.iter().sum();
    let frac = |x: f64| -> f64 { x - x.floor() };
    let floors: Vec<[usize; 3]> = class_sizes
        .iter()
        .map(|&sz| ratios.map(|r| (r * sz as f64).floor() as usize))
        .collect();
    // Rounding options per class: which splits receive its leftover units.
    let options: Vec<Vec<([usize; 3], f64)>> = class_sizes
        .iter()
        .zip(&floors)
        .map(|(&sz, f)| {
            let rem = sz - f.iter().sum::<usize>();
            let q = ratios.map(|r| r * sz as f64);
            let mut opts = Vec::new();
            for mask in 0u8..8 {
                let pick = [0, 1, 2].map(|s| usize::from(mask >> s & 1 == 1));
                let ok = pick.iter().sum::<usize>() == rem && (0..3).all(|s| pick[s] == 0 || frac(q[s]) > 1e-12);
                if ok {
                    let score: f64 = (0..3).filter(|&s| pick[s] == 1).map(|s| frac(q[s])).sum();
                    opts.push((pick, score));
                }
            }
            opts.sort_by(|a, b| b.1.total_cmp(&a.1));
            opts
        })
        .collect();
    let lo = ratios.map(|r| (r * n as f64 + 1e-9).floor() as usize);
    let hi = ratios.map(|r| (r * n as f64 - 1e-9).ceil() as usize);
    let base: [usize; 3] = [0, 1, 2].map(|s| floors.iter().map(|f| f[s]).sum());

    struct Search<'a> {
        options: &'a [Vec<([usize; 3], f64)>],
        lo: [usize; 3],
        hi: [usize; 3],
        choice: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, c: usize, cols: [usize; 3], score: f64) {
            if c == self.options.len() {
                if (0..3).all(|s| cols[s] >= self.lo[s]) && self.best.as_ref().is_none_or(|b| score > b.0 + 1e-12) {
                    self.best = Some((score, self.choice.clone()));
                }
                return;
            }
            for (i, (pick, sc)) in self.options[c].iter().enumerate() {
                let next = [0, 1, 2].map(|s| cols[s] + pick[s]);
                if (0..3).any(|s| next[s] > self.hi[s]) {
                    continue;
                }
                self.choice.push(i);
                self.go(c + 1, next, score + sc);
                self.choice.pop();
            }
        }
    }
    let mut search = Search {
        options: &options,
        lo,
        hi,
        choice: Vec::new(),
        best: None,
    };
    search.go(0, base, 0.0);
    let choice = search.best.map(|b| b.1).unwrap_or_else(|| vec![0; class_sizes.len()]);
    floors
        .iter()
        .zip(&options)
        .zip(&choice)
        .map(|((f, opts), &i)| {
            let pick = opts.get(i).map(|o| o.0).unwrap_or([0; 3]);
            [0, 1, 2].map(|s| f[s] + pick[s])
        })
        .collect()
}

/// Assign patients to splits, stratified by class.
///
/// Per-class and global counts are each the floor or ceiling of their quota.
pub fn patient_split(patients: &[(String, usize)], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, class) in patients {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate patient id `{id}`")));
        }
        by_class.entry(*class).or_default().push(id);
    }
    for (class, ids) in &by_class {
        if ids.len() < 3 {
            return Err(Error::invalid(format!(
                "class {class} has {} patients; stratified splitting needs at least 3",
                ids.len()
            )));
        }
    }

    let counts = stratified_counts(&by_class.values().map(Vec::len).collect::<Vec<_>>(), &ratios);
    let classes: Vec<usize> = by_class.keys().copied().collect();

    let mut out = BTreeMap::new();
    for (ci, c) in classes.iter().enumerate() {
        let mut ids = by_class[c].clone();
        ids.sort_unstable();
        ids.shuffle(&mut crate::seed::rng(crate::seed::derive_indexed(
            seed,
            "patient_split",
            *c as u64,
        )));
        let mut it = ids.into_iter();
        for s in Split::ALL {
            let k = counts[ci][s as usize];
            for id in it.by_ref().take(k) {
                out.insert(id.to_string(), s);
            }
        }
    }
    Ok(SplitAssignment(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(counts: &[usize]) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                v.push((format!("p{c}_{i:03}"), c));
            }
        }
        v
    }

    #[test]
    fn ten_single_class_patients() {
        let a = patient_split(&ids(&[10]), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(
            (a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)),
            (7, 1, 2)
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let p = ids(&[12, 9, 30]);
        assert_eq!(
            patient_split(&p, DEFAULT_RATIOS, 5).unwrap(),
            patient_split(&p, DEFAULT_RATIOS, 5).unwrap()
        );
        assert_ne!(
            patient_split(&p, DEFAULT_RATIOS, 5).unwrap(),
            patient_split(&p, DEFAULT_RATIOS, 6).unwrap()
        );
    }

    #[test]
    fn too_small_class_errors() {
        assert!(patient_split(&ids(&[10, 2]), DEFAULT_RATIOS, 0).is_err());
        let mut dup = ids(&[5]);
        dup.push(dup[0].clone());
        assert!(patient_split(&dup, DEFAULT_RATIOS, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_within_one_patient(counts in proptest::collection::vec(3usize..80, 1..6), seed in 0u64..1000) {
            let p = ids(&counts);
            let a = patient_split(&p, DEFAULT_RATIOS, seed).unwrap();
            prop_assert_eq!(a.0.len(), p.len());
            let n = p.len() as f64;
            for s in Split::ALL {
                let target = DEFAULT_RATIOS[s as usize] * n;
                prop_assert!((a.count(s) as f64 - target).abs() <= 1.0 + 1e-9);
            }
            for (c, &nc) in counts.iter().enumerate() {
                for s in Split::ALL {
                    let k = p.iter().filter(|(id, cl)| *cl == c && a.get(id) == Some(s)).count();
                    let target = DEFAULT_RATIOS[s as usize] * nc as f64;
                    prop_assert!((k as f64 - target).abs() <= 1.0 + 1e-9, "class {} split {} got {} want {}", c, s, k, target);
                }
            }
        }
    }
}
