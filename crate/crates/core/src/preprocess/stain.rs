//! H&E tiles and Macenko stain normalization.
//!
//! Optical density is `OD = −log10(I + ε)` with `I ∈ [0,1]`. Stain vectors
//! live in OD space and have unit norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OD_EPS: f64 = 1e-6;
/// OD-norm threshold separating tissue from background.
pub const OD_BETA: f64 = 0.15;
/// Percentile used for the angular extremes (and 100 − this).
pub const ANGLE_PERCENTILE: f64 = 1.0;
/// Percentile of the concentrations matched to the reference maxima.
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;
/// Tiles with a smaller foreground fraction are rejected.
pub const MIN_TISSUE_FRACTION: f64 = 0.05;

/// Planar RGB tile (`3 × height × width`), values in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbTile {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub tissue_fraction: f32,
}

impl RgbTile {
    /// Build from planar values; clips to `[0,1]` and measures tissue.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height * width == 0 || pixels.len() != 3 * height * width {
            return Err(Error::shape(
                "rgb_tile",
                format!(
                    "{height}×{width} tile needs {} values, got {}",
                    3 * height * width,
                    pixels.len()
                ),
            ));
        }
        for v in &mut pixels {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        let mut tile = Self {
            height,
            width,
            pixels,
            tissue_fraction: 0.0,
        };
        tile.tissue_fraction = tile.foreground_mask().iter().filter(|&&f| f).count() as f32 / (height * width) as f32;
        Ok(tile)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let a = self.area();
        [
            f64::from(self.pixels[i]),
            f64::from(self.pixels[a + i]),
            f64::from(self.pixels[2 * a + i]),
        ]
    }

    pub fn optical_density(&self) -> Vec<[f64; 3]> {
        (0..self.area()).map(|i| optical_density(self.rgb(i))).collect()
    }

    /// Pixels whose OD norm reaches [`OD_BETA`].
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.optical_density().iter().map(|od| norm(od) >= OD_BETA).collect()
    }
}

pub fn optical_density(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| -(v + OD_EPS).log10())
}

fn intensity(od: f64) -> f32 {
    (10f64.powf(-od) - OD_EPS).clamp(0.0, 1.0) as f32
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(&a);
    a.map(|v| v / n)
}

/// Angle in radians between two directions.
pub fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

/// Target appearance: hematoxylin and eosin OD directions plus the
/// concentration maxima that normalized tiles are rescaled to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainReference {
    /// Columns: `[hematoxylin, eosin]`, each unit norm.
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

impl StainReference {
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        if norm(&hematoxylin) == 0.0 || norm(&eosin) == 0.0 {
            return Err(Error::invalid("stain vectors must be nonzero"));
        }
        let (h, e) = (unit(hematoxylin), unit(eosin));
        if angle_between(&h, &e) < 1e-3 {
            return Err(Error::invalid("stain vectors are collinear"));
        }
        if max_concentrations.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::invalid("max concentrations must be positive"));
        }
        Ok(Self {
            stain_matrix: [h, e],
            max_concentrations,
        })
    }

    /// Widely used H&E reference vectors.
    pub fn standard() -> Self {
        Self::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [1.9, 1.0]).expect("valid reference")
    }
}

/// Stain directions and per-pixel concentrations recovered from a tile.
#[derive(Clone, Debug)]
pub struct StainEstimate {
    pub stains: [[f64; 3]; 2],
    pub concentrations: Vec<[f64; 2]>,
    pub max_concentrations: [f64; 2],
}

/// Linear-interpolated percentile (`q` in `[0,100]`) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    percentile_sorted(values, q)
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi.
/// Returns eigenvalues descending with matching unit eigenvectors.
fn symmetric_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let vals = order.map(|i| a[i][i]);
    let vecs = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (vals, vecs)
}

/// Nonnegative least squares for `od ≈ c₀·s₀ + c₁·s₁`.
fn unmix_nonnegative(od: &[f64; 3], s: &[[f64; 3]; 2]) -> [f64; 2] {
    let g00 = dot(&s[0], &s[0]);
    let g11 = dot(&s[1], &s[1]);
    let g01 = dot(&s[0], &s[1]);
    let b0 = dot(&s[0], od);
    let b1 = dot(&s[1], od);
    let det = g00 * g11 - g01 * g01;
    let resid = |c: [f64; 2]| {
        let r = [0, 1, 2].map(|k| od[k] - c[0] * s[0][k] - c[1] * s[1][k]);
        dot(&r, &r)
    };
    let free = [(g11 * b0 - g01 * b1) / det, (g00 * b1 - g01 * b0) / det];
    if free[0] >= 0.0 && free[1] >= 0.0 {
        return free;
    }
    let candidates = [[(b0 / g00).max(0.0), 0.0], [0.0, (b1 / g11).max(0.0)], [0.0, 0.0]];
    candidates
        .into_iter()
        .min_by(|a, b| resid(*a).total_cmp(&resid(*b)))
        .expect("non-empty")
}

/// Recover stain vectors and concentrations from a tile.
pub fn estimate_stains(tile: &RgbTile) -> Result<StainEstimate> {
    let od = tile.optical_density();
    let fg: Vec<[f64; 3]> = od.iter().filter(|o| norm(o) >= OD_BETA).copied().collect();
    let frac = fg.len() as f64 / od.len() as f64;
    if frac < MIN_TISSUE_FRACTION {
        return Err(Error::TileRejected(format!(
            "foreground fraction {frac:.3} below {MIN_TISSUE_FRACTION}"
        )));
    }
    let n = fg.len() as f64;
    let mean = [0, 1, 2].map(|k| fg.iter().map(|o| o[k]).sum::<f64>() / n);
    let mut cov = [[0.0; 3]; 3];
    for o in &fg {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (o[i] - mean[i]) * (o[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1.0).max(1.0);
        }
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    if !(vals[1] > 1e-12 && vals[1] > 1e-6 * vals[0]) {
        return Err(Error::TileRejected(format!(
            "optical-density covariance has rank < 2 (eigenvalues {:.3e}, {:.3e})",
            vals[0], vals[1]
        )));
    }
    let orient = |v: [f64; 3]| if v.iter().sum::<f64>() < 0.0 { v.map(|x| -x) } else { v };
    let (e1, e2) = (orient(vecs[0]), orient(vecs[1]));
    let mut angles: Vec<f64> = fg.iter().map(|o| dot(o, &e2).atan2(dot(o, &e1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, ANGLE_PERCENTILE);
    let hi = percentile_sorted(&angles, 100.0 - ANGLE_PERCENTILE);
    let dir = |phi: f64| unit([0, 1, 2].map(|k| e1[k] * phi.cos() + e2[k] * phi.sin()));
    let (vlo, vhi) = (orient(dir(lo)), orient(dir(hi)));
    let stains = if vlo[0] > vhi[0] { [vlo, vhi] } else { [vhi, vlo] };
    if angle_between(&stains[0], &stains[1]) < 1e-3 {
        return Err(Error::TileRejected("estimated stain vectors are collinear".into()));
    }
    let concentrations: Vec<[f64; 2]> = od.iter().map(|o| unmix_nonnegative(o, &stains)).collect();
    let max_concentrations = [0, 1].map(|k| {
        let mut c: Vec<f64> = concentrations.iter().map(|c| c[k]).collect();
        percentile(&mut c, CONCENTRATION_PERCENTILE)
    });
    if max_concentrations.iter().any(|&m| !(m > 1e-9)) {
        return Err(Error::TileRejected("a stain has no measurable concentration".into()));
    }
    Ok(StainEstimate {
        stains,
        concentrations,
        max_concentrations,
    })
}

/// Render a tile from stain vectors and per-pixel concentrations.
pub fn beer_lambert(height: usize, width: usize, stains: &[[f64; 3]; 2], conc: &[[f64; 2]]) -> Result<RgbTile> {
    let area = height * width;
    if conc.len() != area {
        return Err(Error::shape(
            "beer_lambert",
            format!("{} concentrations for {area} pixels", conc.len()),
        ));
    }
    let mut px = vec![0.0f32; 3 * area];
    for (i, c) in conc.iter().enumerate() {
        for k in 0..3 {
            px[k * area + i] = intensity(c[0] * stains[0][k] + c[1] * stains[1][k]);
        }
    }
    RgbTile::new(height, width, px)
}

/// Macenko stain normalization of one tile towards `reference`.
pub fn macenko_normalize(tile: &RgbTile, reference: &StainReference) -> Result<RgbTile> {
    let est = estimate_stains(tile)?;
    let scale = [0, 1].map(|k| reference.max_concentrations[k] / est.max_concentrations[k]);
    let conc: Vec<[f64; 2]> = est
        .concentrations
        .iter()
        .map(|c| [c[0] * scale[0], c[1] * scale[1]])
        .collect();
    beer_lambert(tile.height, tile.width, &reference.stain_matrix, &conc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let (vals, vecs) = symmetric_eigen3([[4.0, 1.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.0, 1.0]]);
        let s5 = 5f64.sqrt();
        assert!((vals[0] - (3.5 + s5 / 2.0)).abs() < 1e-12);
        assert!((vals[1] - (3.5 - s5 / 2.0)).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        for v in vecs {
            assert!((norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nnls_clamps_negative_component() {
        let s = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(unmix_nonnegative(&[0.5, -0.2, 0.0], &s), [0.5, 0.0]);
        let c = unmix_nonnegative(&[0.3, 0.7, 0.0], &s);
        assert!((c[0] - 0.3).abs() < 1e-12 && (c[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn white_tile_is_rejected() {
        let tile = RgbTile::new(8, 8, vec![1.0; 192]).unwrap();
        assert_eq!(tile.tissue_fraction, 0.0);
        assert!(matches!(
            macenko_normalize(&tile, &StainReference::standard()),
            Err(Error::TileRejected(_))
        ));
    }

    #[test]
    fn single_stain_tile_is_degenerate() {
        let r = StainReference::standard();
        let conc: Vec<[f64; 2]> = (0..64).map(|i| [0.2 + 0.01 * i as f64, 0.0]).collect();
        let tile = beer_lambert(8, 8, &r.stain_matrix, &conc).unwrap();
        assert!(matches!(estimate_stains(&tile), Err(Error::TileRejected(_))));
    }

    #[test]
    fn reference_validation() {
        assert!(StainReference::new([1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0]).is_err());
        assert!(StainReference::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0]).is_err());
        let r = StainReference::standard();
        for s in r.stain_matrix {
            assert!((norm(&s) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 50.0), 5.0);
        assert_eq!(percentile_sorted(&[1.0, 2.0, 3.0], 100.0), 3.0);
    }
}
