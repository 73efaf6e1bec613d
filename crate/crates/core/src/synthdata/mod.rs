//! Procedural paired CT / H&E patients with ground-truth lesion masks and
//! class-correlated clinical metadata.

mod baseline;
mod ct;
mod he;
pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NORMAL_CLASS, NUM_CLASSES};
use crate::preprocess::{patient_split, CtPatch, RawMetadata, RgbTile, SplitAssignment, DEFAULT_RATIOS, LUNG_WINDOW};
use crate::seed;

pub use baseline::{threshold_features, NearestCentroid};
pub use io::{read_dataset, write_dataset, ManifestRow};

/// Default class proportions (adenocarcinoma, squamous, large cell, SCLC,
/// normal), proportional to 380/320/210/290/250.
pub const DEFAULT_PROPORTIONS: [f64; NUM_CLASSES] = [
    380.0 / 1450.0,
    320.0 / 1450.0,
    210.0 / 1450.0,
    290.0 / 1450.0,
    250.0 / 1450.0,
];

/// CT modality corrupted when smoking == 2, H&E when smoking == 0, each with
/// this probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRegime {
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub patients: usize,
    pub proportions: [f64; NUM_CLASSES],
    pub ct_size: usize,
    pub tile_size: usize,
    pub tiles_per_slide: usize,
    /// Per-pixel Gaussian noise on CT, in HU.
    pub ct_noise_hu: f64,
    /// Per-pixel Gaussian noise on H&E intensities.
    pub he_noise: f64,
    /// Probability that a smoking code is 1 or 2 for SCLC and squamous.
    pub smoker_prob_high: f64,
    /// The same for the remaining classes.
    pub smoker_prob_low: f64,
    pub corruption: Option<CorruptionRegime>,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            patients: 500,
            proportions: DEFAULT_PROPORTIONS,
            ct_size: 64,
            tile_size: 32,
            tiles_per_slide: 8,
            ct_noise_hu: 30.0,
            he_noise: 0.01,
            smoker_prob_high: 0.8,
            smoker_prob_low: 0.3,
            corruption: None,
            split_ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proportions.iter().any(|&p| !(p > 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("class proportions must be positive and sum to 1"));
        }
        if self.ct_size < 16 || self.tile_size < 16 || self.tiles_per_slide == 0 {
            return Err(Error::invalid(
                "CT and tile sizes must be at least 16 and slides need a tile",
            ));
        }
        for p in [self.smoker_prob_high, self.smoker_prob_low] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("smoker probabilities must lie in [0,1]"));
            }
        }
        if let Some(c) = self.corruption {
            if !(0.0..=1.0).contains(&c.probability) {
                return Err(Error::invalid("corruption probability must lie in [0,1]"));
            }
        }
        if self.ct_noise_hu < 0.0 || self.he_noise < 0.0 {
            return Err(Error::invalid("noise levels must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionFlags {
    pub ct: bool,
    pub he: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    He,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: usize,
    pub metadata: RawMetadata,
    /// CT in surrogate HU with lesion mask.
    pub ct: CtPatch,
    pub tiles: Vec<RgbTile>,
    pub tile_masks: Vec<Vec<bool>>,
    pub corrupted: CorruptionFlags,
}

fn sample_metadata(label: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<RawMetadata> {
    let p_smoker = if label == 1 || label == 3 {
        cfg.smoker_prob_high
    } else {
        cfg.smoker_prob_low
    };
    let smoking = if rng.random::<f64>() < p_smoker {
        1 + u8::from(rng.random::<bool>())
    } else {
        0
    };
    let normal = rand_distr::Normal::new(65.0, 8.0).map_err(|e| Error::invalid(e.to_string()))?;
    let age: f64 = rand_distr::Distribution::sample(&normal, rng);
    let age = age.clamp(30.0, 90.0);
    let sex = u8::from(rng.random::<bool>());
    Ok(RawMetadata { age, sex, smoking })
}

/// One patient of class `label`; a pure function of `(label, seed, cfg)`.
pub fn generate_patient(label: usize, seed: u64, cfg: &GeneratorConfig) -> Result<PatientRecord> {
    if label >= NUM_CLASSES {
        return Err(Error::invalid(format!("class id {label} out of range")));
    }
    let metadata = sample_metadata(label, cfg, &mut seed::rng(seed::derive(seed, "metadata")))?;
    let ct = ct::generate(label, cfg, &mut seed::rng(seed::derive(seed, "ct")))?;
    let (tiles, tile_masks) = he::generate_slide(label, cfg, &mut seed::rng(seed::derive(seed, "he")))?;
    Ok(PatientRecord {
        patient_id: format!("P{:016x}", seed),
        label,
        metadata,
        ct,
        tiles,
        tile_masks,
        corrupted: CorruptionFlags::default(),
    })
}

/// Replace one modality with seeded uniform white noise: CT over the lung
/// window in HU, H&E over `[0,1]` per channel. Masks are left alone.
pub fn corrupt_modality(record: &PatientRecord, modality: Modality, seed: u64) -> Result<PatientRecord> {
    let mut rng = seed::rng(seed::derive(seed, "corrupt"));
    let mut out = record.clone();
    match modality {
        Modality::Ct => {
            let (lo, hi) = LUNG_WINDOW;
            for v in &mut out.ct.pixels {
                *v = rng.random_range(lo..hi);
            }
            out.corrupted.ct = true;
        }
        Modality::He => {
            for t in &mut out.tiles {
                let px: Vec<f32> = (0..t.pixels.len()).map(|_| rng.random::<f32>()).collect();
                *t = RgbTile::new(t.height, t.width, px)?;
            }
            out.corrupted.he = true;
        }
    }
    Ok(out)
}

/// Class counts from proportions by largest remainder (ties to the lower
/// class index).
pub fn class_counts(n: usize, proportions: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let quotas = proportions.map(|p| p * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n.saturating_sub(counts.iter().sum());
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub split: SplitAssignment,
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let counts = class_counts(cfg.patients, &cfg.proportions);
    if let Some(c) = counts.iter().position(|&k| k < 3) {
        return Err(Error::invalid(format!(
            "{} patients leave class {c} with {} members; stratified splitting needs at least 3 per class",
            cfg.patients, counts[c]
        )));
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut seed::rng(seed::derive(cfg.seed, "labels")));

    let mut records = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let ps = seed::derive_indexed(cfg.seed, "patient", i as u64);
        let mut r = generate_patient(label, ps, cfg)?;
        r.patient_id = format!("P{i:04}");
        if let Some(regime) = cfg.corruption {
            let mut rng = seed::rng(seed::derive(ps, "corruption"));
            let draw = rng.random::<f64>() < regime.probability;
            match r.metadata.smoking {
                2 if draw => r = corrupt_modality(&r, Modality::Ct, ps)?,
                0 if draw => r = corrupt_modality(&r, Modality::He, ps)?,
                _ => {}
            }
        }
        records.push(r);
    }
    let pairs: Vec<(String, usize)> = records.iter().map(|r| (r.patient_id.clone(), r.label)).collect();
    let split = patient_split(&pairs, cfg.split_ratios, seed::derive(cfg.seed, "split"))?;
    Ok(Dataset { records, split })
}

/// True when the class carries a lesion.
pub fn has_lesion(label: usize) -> bool {
    label != NORMAL_CLASS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn scaled_class_counts() {
        assert_eq!(class_counts(145, &DEFAULT_PROPORTIONS), [38, 32, 21, 29, 25]);
        assert_eq!(class_counts(1450, &DEFAULT_PROPORTIONS), [380, 320, 210, 290, 250]);
        assert_eq!(class_counts(500, &DEFAULT_PROPORTIONS).iter().sum::<usize>(), 500);
    }

    #[test]
    fn normal_has_empty_masks_and_generation_is_deterministic() {
        let cfg = small();
        let r = generate_patient(NORMAL_CLASS, 17, &cfg).unwrap();
        assert_eq!(r.ct.mask_area(), 0);
        assert!(r.tile_masks.iter().all(|m| m.iter().all(|&b| !b)));
        assert_eq!(r, generate_patient(NORMAL_CLASS, 17, &cfg).unwrap());
        for c in 0..NORMAL_CLASS {
            let r = generate_patient(c, 5, &cfg).unwrap();
            assert!(r.ct.mask_area() > 0, "class {c}");
            assert!(r.tile_masks.iter().any(|m| m.iter().any(|&b| b)), "class {c}");
            assert_eq!(r.tiles.len(), cfg.tiles_per_slide);
        }
        assert!(generate_patient(5, 0, &cfg).is_err());
    }

    #[test]
    fn sclc_smoking_frequency() {
        let cfg = small();
        let mut smokers = 0;
        for i in 0..1000u64 {
            let m = sample_metadata(3, &cfg, &mut seed::rng(seed::derive_indexed(9, "m", i))).unwrap();
            assert!((30.0..=90.0).contains(&m.age));
            smokers += usize::from(m.smoking >= 1);
        }
        assert!((smokers as f64 / 1000.0 - 0.8).abs() <= 0.04, "{smokers}");
    }

    #[test]
    fn corruption_isolates_modality_and_matches_noise_moments() {
        let cfg = small();
        let r = generate_patient(0, 3, &cfg).unwrap();
        let c = corrupt_modality(&r, Modality::Ct, 11).unwrap();
        assert_eq!(c.tiles, r.tiles);
        assert_eq!(c.ct.lesion_mask, r.ct.lesion_mask);
        assert!(c.corrupted.ct && !c.corrupted.he);
        let n = c.ct.pixels.len() as f64;
        let mean = c.ct.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = c.ct.pixels.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let (lo, hi) = (f64::from(LUNG_WINDOW.0), f64::from(LUNG_WINDOW.1));
        let (em, ev) = ((lo + hi) / 2.0, (hi - lo).powi(2) / 12.0);
        assert!(((mean - em) / em).abs() < 0.05, "{mean}");
        assert!(((var - ev) / ev).abs() < 0.05, "{var}");

        let h = corrupt_modality(&r, Modality::He, 11).unwrap();
        assert_eq!(h.ct, r.ct);
        let px: Vec<f64> = h
            .tiles
            .iter()
            .flat_map(|t| t.pixels.iter().map(|&v| f64::from(v)))
            .collect();
        let n = px.len() as f64;
        let mean = px.iter().sum::<f64>() / n;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() / 0.5 < 0.05);
        assert!((var - 1.0 / 12.0).abs() * 12.0 < 0.05);
    }

    #[test]
    fn corruption_frequency_among_current_smokers() {
        let cfg = GeneratorConfig {
            patients: 3000,
            ct_size: 16,
            tile_size: 16,
            tiles_per_slide: 1,
            corruption: Some(CorruptionRegime { probability: 0.5 }),
            seed: 6,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let smokers: Vec<_> = ds.records.iter().filter(|r| r.metadata.smoking == 2).collect();
        let frac = smokers.iter().filter(|r| r.corrupted.ct).count() as f64 / smokers.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "{frac} over {}", smokers.len());
        assert!(ds.records.iter().all(|r| !(r.corrupted.ct && r.corrupted.he)));
        let ids: Vec<Vec<String>> = crate::preprocess::Split::ALL
            .iter()
            .map(|&s| ds.split.ids(s).into_iter().map(String::from).collect())
            .collect();
        assert!(SplitAssignment::leaked_ids(ids.iter().map(Vec::as_slice)).is_empty());
    }

    #[test]
    fn too_few_patients_errors() {
        let cfg = GeneratorConfig {
            patients: 10,
            ..small()
        };
        assert!(generate_dataset(&cfg).is_err());
    }
}
