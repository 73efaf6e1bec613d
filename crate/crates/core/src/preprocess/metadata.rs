use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw clinical metadata. `sex`: 0 = female, 1 = male. `smoking`:
/// 0 = never, 1 = former, 2 = current.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMetadata {
    pub age: f64,
    pub sex: u8,
    pub smoking: u8,
}

impl RawMetadata {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0 && self.age.is_finite()) {
            return Err(Error::invalid(format!("age must be positive, got {}", self.age)));
        }
        if self.sex > 1 {
            return Err(Error::invalid(format!("sex code {} not in {{0,1}}", self.sex)));
        }
        if self.smoking > 2 {
            return Err(Error::invalid(format!(
                "smoking code {} not in {{0,1,2}}",
                self.smoking
            )));
        }
        Ok(())
    }

    fn components(&self) -> [f64; 3] {
        [self.age, f64::from(self.sex), f64::from(self.smoking)]
    }
}

/// Per-component mean and (population) standard deviation fitted on the
/// training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const COMPONENTS: [&str; 3] = ["age", "sex", "smoking"];

impl MetadataStats {
    pub fn fit(train: &[RawMetadata]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit("no training metadata to fit statistics".into()));
        }
        let n = train.len() as f64;
        let mut mean = [0.0; 3];
        for r in train {
            r.validate()?;
            for (m, v) in mean.iter_mut().zip(r.components()) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        for r in train {
            for ((s, v), m) in std.iter_mut().zip(r.components()).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = std.map(f64::sqrt);
        for (k, s) in std.iter().enumerate() {
            if *s <= 1e-12 {
                return Err(Error::ZeroVariance(COMPONENTS[k]));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, raw: &RawMetadata) -> Result<MetadataVector> {
        raw.validate()?;
        let c = raw.components();
        let standardized = [0, 1, 2].map(|k| (c[k] - self.mean[k]) / self.std[k]);
        Ok(MetadataVector {
            age_z: standardized[0],
            sex: raw.sex,
            smoking: raw.smoking,
            standardized,
        })
    }
}

/// Standardized metadata as fed to the clinical encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataVector {
    pub age_z: f64,
    pub sex: u8,
    pub smoking: u8,
    pub standardized: [f64; 3],
}

/// Fit statistics on the rows flagged in `train_mask` and z-score every row.
pub fn standardize_metadata(raw: &[RawMetadata], train_mask: &[bool]) -> Result<(Vec<MetadataVector>, MetadataStats)> {
    if raw.len() != train_mask.len() {
        return Err(Error::shape(
            "standardize_metadata",
            format!("{} rows vs {} mask entries", raw.len(), train_mask.len()),
        ));
    }
    let train: Vec<RawMetadata> = raw
        .iter()
        .zip(train_mask)
        .filter(|(_, &m)| m)
        .map(|(r, _)| *r)
        .collect();
    let stats = MetadataStats::fit(&train)?;
    let out = raw.iter().map(|r| stats.apply(r)).collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}
