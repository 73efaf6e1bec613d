//! Pixel-threshold baseline used to check that CT classes are separable.

use crate::model::NUM_CLASSES;
use crate::preprocess::CtPatch;

const THRESHOLD_HU: f32 = -400.0;

fn components(mask: &[bool], h: usize, w: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

/// `[ln(1 + area), fill ratio of bounding box, ln(1 + components)]` of the
/// pixels above −400 HU.
pub fn threshold_features(ct: &CtPatch) -> [f64; 3] {
    let (h, w) = (ct.height, ct.width);
    let mask: Vec<bool> = ct.pixels.iter().map(|&v| v > THRESHOLD_HU).collect();
    let area = mask.iter().filter(|&&m| m).count();
    if area == 0 {
        return [0.0; 3];
    }
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / w, i % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let bbox = (y1 - y0 + 1) * (x1 - x0 + 1);
    [
        (1.0 + area as f64).ln(),
        area as f64 / bbox as f64,
        (1.0 + components(&mask, h, w) as f64).ln(),
    ]
}

/// Nearest class centroid in z-scored feature space.
#[derive(Clone, Debug)]
pub struct NearestCentroid {
    mean: [f64; 3],
    std: [f64; 3],
    centroids: Vec<Option<[f64; 3]>>,
}

impl NearestCentroid {
    pub fn fit(features: &[[f64; 3]], labels: &[usize]) -> Self {
        let n = features.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for f in features {
            for k in 0..3 {
                mean[k] += f[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for f in features {
            for k in 0..3 {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        let std = std.map(|v| v.sqrt().max(1e-9));
        let mut sums = vec![([0.0; 3], 0usize); NUM_CLASSES];
        for (f, &l) in features.iter().zip(labels) {
            for k in 0..3 {
                sums[l].0[k] += (f[k] - mean[k]) / std[k];
            }
            sums[l].1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(s, c)| (c > 0).then(|| s.map(|v| v / c as f64)))
            .collect();
        Self { mean, std, centroids }
    }

    pub fn predict(&self, f: &[f64; 3]) -> usize {
        let z = [0, 1, 2].map(|k| (f[k] - self.mean[k]) / self.std[k]);
        let mut best = (f64::INFINITY, 0);
        for (c, cen) in self.centroids.iter().enumerate() {
            if let Some(cen) = cen {
                let d: f64 = (0..3).map(|k| (z[k] - cen[k]).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
        }
        best.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::synthdata::{generate_patient, GeneratorConfig};

    #[test]
    fn baseline_separates_ct_classes() {
        let cfg = GeneratorConfig::default();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400u64 {
            let label = (i % 5) as usize;
            let r = generate_patient(label, seed::derive_indexed(21, "baseline", i), &cfg).unwrap();
            feats.push(threshold_features(&r.ct));
            labels.push(label);
        }
        let clf = NearestCentroid::fit(&feats[..200], &labels[..200]);
        let correct = (200..400).filter(|&i| clf.predict(&feats[i]) == labels[i]).count();
        assert!(
            correct as f64 / 200.0 >= 0.9,
            "baseline accuracy {}",
            correct as f64 / 200.0
        );
    }

    #[test]
    fn counts_components() {
        let m = [true, false, true, true, false, false, false, false, true];
        assert_eq!(components(&m, 3, 3), 3);
    }
}
