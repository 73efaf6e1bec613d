use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conventional lung window in surrogate Hounsfield units.
pub const LUNG_WINDOW: (f32, f32) = (-1000.0, 400.0);

/// Single-channel CT patch with its lesion mask, both `height × width`
/// row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtPatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub lesion_mask: Vec<bool>,
}

impl CtPatch {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, lesion_mask: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if n == 0 || pixels.len() != n || lesion_mask.len() != n {
            return Err(Error::shape(
                "ct_patch",
                format!(
                    "{height}×{width} patch with {} pixels and {} mask cells",
                    pixels.len(),
                    lesion_mask.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
            lesion_mask,
        })
    }

    pub fn mask_area(&self) -> usize {
        self.lesion_mask.iter().filter(|&&m| m).count()
    }
}

/// Map `[low, high]` affinely onto `[0, 1]`, clipping outside the window.
pub fn hu_normalize(patch: &CtPatch, window_low: f32, window_high: f32) -> Result<CtPatch> {
    if !(window_low < window_high) {
        return Err(Error::invalid(format!(
            "window low {window_low} must be below high {window_high}"
        )));
    }
    let span = window_high - window_low;
    Ok(CtPatch {
        pixels: patch
            .pixels
            .iter()
            .map(|&v| ((v - window_low) / span).clamp(0.0, 1.0))
            .collect(),
        ..patch.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(px: Vec<f32>) -> CtPatch {
        let n = px.len();
        CtPatch::new(1, n, px, vec![false; n]).unwrap()
    }

    #[test]
    fn endpoints_midpoint_and_clipping() {
        let p = patch(vec![-1000.0, 400.0, -300.0, -2000.0, 3000.0]);
        let out = hu_normalize(&p, -1000.0, 400.0).unwrap();
        assert_eq!(out.pixels, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn inverted_window_errors() {
        let p = patch(vec![0.0]);
        assert!(hu_normalize(&p, 10.0, 10.0).is_err());
        assert!(hu_normalize(&p, 10.0, -10.0).is_err());
    }

    #[test]
    fn mask_shape_checked() {
        assert!(CtPatch::new(2, 2, vec![0.0; 4], vec![false; 3]).is_err());
    }

    proptest! {
        #[test]
        fn output_in_unit_interval(px in proptest::collection::vec(-5000.0f32..5000.0, 1..64), lo in -2000.0f32..0.0, w in 1.0f32..3000.0) {
            let out = hu_normalize(&patch(px), lo, lo + w).unwrap();
            prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
