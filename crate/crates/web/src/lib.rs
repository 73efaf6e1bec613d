//! WebAssembly bindings for the browser demo. Everything heavy runs in the
//! `lungfuse` core; this crate only converts to RGBA buffers and strings.

use lungfuse::evaluation::{delong_test, DeLongResult};
use lungfuse::model::CLASS_NAMES;
use lungfuse::preprocess::stain::angle_between;
use lungfuse::preprocess::{
    estimate_stains, hu_normalize, macenko_normalize, CtPatch, RgbTile, StainReference, LUNG_WINDOW,
};
use lungfuse::synthdata::{generate_patient, GeneratorConfig, PatientRecord};
use lungfuse::{seed, Error, Result};
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale `[0,1]` values as opaque RGBA.
pub fn gray_rgba(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let b = to_byte(v);
            [b, b, b, 255]
        })
        .collect()
}

/// Grayscale image with a red tint where `mask` is set.
pub fn masked_rgba(values: &[f32], mask: &[bool]) -> Vec<u8> {
    values
        .iter()
        .zip(mask)
        .flat_map(|(&v, &m)| {
            let b = to_byte(v);
            if m {
                [b.saturating_add(110), b / 2, b / 2, 255]
            } else {
                [b, b, b, 255]
            }
        })
        .collect()
}

/// Planar `(3, H, W)` RGB as interleaved RGBA.
pub fn planar_rgba(tile: &RgbTile) -> Vec<u8> {
    let n = tile.height * tile.width;
    (0..n)
        .flat_map(|i| {
            let p = &tile.pixels;
            [to_byte(p[i]), to_byte(p[n + i]), to_byte(p[2 * n + i]), 255]
        })
        .collect()
}

/// ROC polyline as flat `[fpr0, tpr0, fpr1, tpr1, ...]`, from `(0,0)` to
/// `(1,1)`. Tied scores move diagonally.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = vec![0.0, 0.0];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push(if neg > 0.0 { fp / neg } else { 0.0 });
        out.push(if pos > 0.0 { tp / pos } else { 0.0 });
    }
    out
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One synthetic patient: windowed CT with lesion mask, H&E bag and
/// metadata.
#[wasm_bindgen]
pub struct Patient {
    record: PatientRecord,
    ct: CtPatch,
    reference: StainReference,
}

impl Patient {
    pub fn generate(label: usize, seed: u64) -> Result<Self> {
        if label >= CLASS_NAMES.len() {
            return Err(Error::InvalidArgument(format!("class {label} out of range")));
        }
        let record = generate_patient(label, seed, &GeneratorConfig::default())?;
        let ct = hu_normalize(&record.ct, LUNG_WINDOW.0, LUNG_WINDOW.1)?;
        Ok(Self {
            record,
            ct,
            reference: StainReference::standard(),
        })
    }

    fn tile(&self, index: usize) -> Result<&RgbTile> {
        self.record
            .tiles
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("tile {index} of {}", self.record.tiles.len())))
    }

    pub fn normalized_tile(&self, index: usize) -> Result<RgbTile> {
        macenko_normalize(self.tile(index)?, &self.reference)
    }

    /// Angles in degrees between the estimated and reference stain vectors.
    pub fn stain_angles(&self, index: usize) -> Result<[f64; 2]> {
        let est = estimate_stains(self.tile(index)?)?;
        let r = &self.reference.stain_matrix;
        Ok([
            angle_between(&est.stains[0], &r[0]).to_degrees(),
            angle_between(&est.stains[1], &r[1]).to_degrees(),
        ])
    }
}

#[wasm_bindgen]
impl Patient {
    #[wasm_bindgen(constructor)]
    pub fn new(label: u32, seed: u32) -> std::result::Result<Patient, JsError> {
        Self::generate(label as usize, u64::from(seed)).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn ct_size(&self) -> usize {
        self.ct.width
    }

    #[wasm_bindgen(getter)]
    pub fn tile_size(&self) -> usize {
        self.record.tiles.first().map_or(0, |t| t.width)
    }

    #[wasm_bindgen(getter)]
    pub fn tile_count(&self) -> usize {
        self.record.tiles.len()
    }

    #[wasm_bindgen(getter)]
    pub fn class_name(&self) -> String {
        CLASS_NAMES[self.record.label].replace('_', " ")
    }

    pub fn summary(&self) -> String {
        let m = &self.record.metadata;
        let smoking = ["never", "former", "current"].get(m.smoking as usize).unwrap_or(&"?");
        format!(
            "{} | age {:.0}, {}, {} smoker | lesion {} px",
            self.class_name(),
            m.age,
            if m.sex == 0 { "female" } else { "male" },
            smoking,
            self.ct.mask_area()
        )
    }

    pub fn ct_rgba(&self, show_mask: bool) -> Vec<u8> {
        if show_mask {
            masked_rgba(&self.ct.pixels, &self.ct.lesion_mask)
        } else {
            gray_rgba(&self.ct.pixels)
        }
    }

    pub fn tile_rgba(&self, index: usize, normalized: bool) -> std::result::Result<Vec<u8>, JsError> {
        if normalized {
            self.normalized_tile(index).map(|t| planar_rgba(&t)).map_err(js)
        } else {
            self.tile(index).map(planar_rgba).map_err(js)
        }
    }

    pub fn stain_report(&self, index: usize) -> std::result::Result<String, JsError> {
        let before = self.stain_angles(index).map_err(js)?;
        let normalized = self.normalized_tile(index).map_err(js)?;
        let est = estimate_stains(&normalized).map_err(js)?;
        let r = &self.reference.stain_matrix;
        Ok(format!(
            "angle to reference H/E: {:.1}° / {:.1}° before, {:.1}° / {:.1}° after",
            before[0],
            before[1],
            angle_between(&est.stains[0], &r[0]).to_degrees(),
            angle_between(&est.stains[1], &r[1]).to_degrees(),
        ))
    }
}

/// Two correlated binary scorers on the same samples and their DeLong
/// comparison.
#[wasm_bindgen]
pub struct RocComparison {
    result: DeLongResult,
    curve_a: Vec<f64>,
    curve_b: Vec<f64>,
}

impl RocComparison {
    pub fn simulate(n_pos: usize, n_neg: usize, shift_a: f64, shift_b: f64, rho: f64, seed: u64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("correlation {rho} outside [-1, 1]")));
        }
        let mut rng = seed::rng(seed);
        let labels: Vec<bool> = (0..n_pos + n_neg).map(|i| i < n_pos).collect();
        let (mut a, mut b) = (Vec::with_capacity(labels.len()), Vec::with_capacity(labels.len()));
        for &y in &labels {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let y = if y { 1.0 } else { 0.0 };
            a.push(shift_a * y + z1);
            b.push(shift_b * y + rho * z1 + (1.0 - rho * rho).sqrt() * z2);
        }
        Ok(Self {
            result: delong_test(&a, &b, &labels)?,
            curve_a: roc_points(&a, &labels),
            curve_b: roc_points(&b, &labels),
        })
    }
}

#[wasm_bindgen]
impl RocComparison {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_pos: usize,
        n_neg: usize,
        shift_a: f64,
        shift_b: f64,
        rho: f64,
        seed: u32,
    ) -> std::result::Result<RocComparison, JsError> {
        Self::simulate(n_pos, n_neg, shift_a, shift_b, rho, u64::from(seed)).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn auc_a(&self) -> f64 {
        self.result.auc_a
    }

    #[wasm_bindgen(getter)]
    pub fn auc_b(&self) -> f64 {
        self.result.auc_b
    }

    #[wasm_bindgen(getter)]
    pub fn z(&self) -> f64 {
        self.result.z
    }

    #[wasm_bindgen(getter)]
    pub fn p_value(&self) -> f64 {
        self.result.p_value
    }

    #[wasm_bindgen(getter)]
    pub fn degenerate(&self) -> bool {
        self.result.degenerate
    }

    pub fn curve_a(&self) -> Vec<f64> {
        self.curve_a.clone()
    }

    pub fn curve_b(&self) -> Vec<f64> {
        self.curve_b.clone()
    }
}
