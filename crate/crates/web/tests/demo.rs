use lungfuse::evaluation::auroc_binary;
use lungfuse::preprocess::estimate_stains;
use lungfuse::preprocess::stain::angle_between;
use lungfuse_web::{gray_rgba, masked_rgba, roc_points, Patient, RocComparison};

fn trapezoid(points: &[f64]) -> f64 {
    points
        .chunks(2)
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]) * (w[1][1] + w[0][1]) / 2.0)
        .sum()
}

#[test]
fn gray_buffer_is_opaque_rgba() {
    let px = gray_rgba(&[0.0, 0.5, 1.0, 2.0]);
    assert_eq!(
        px,
        vec![0, 0, 0, 255, 128, 128, 128, 255, 255, 255, 255, 255, 255, 255, 255, 255]
    );
    let m = masked_rgba(&[0.5, 0.5], &[true, false]);
    assert!(m[0] > m[1]);
    assert_eq!(&m[4..8], &[128, 128, 128, 255]);
}

#[test]
fn roc_area_matches_auroc() {
    let cases: Vec<(Vec<f64>, Vec<bool>)> = vec![
        (vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]),
        (vec![1.0, 1.0, 1.0, 0.0, 0.0], vec![true, false, true, false, true]),
        (
            (0..40).map(|i| f64::from(i % 7)).collect(),
            (0..40).map(|i| i % 3 == 0).collect(),
        ),
    ];
    for (s, l) in cases {
        let pts = roc_points(&s, &l);
        assert_eq!(&pts[..2], &[0.0, 0.0]);
        assert_eq!(&pts[pts.len() - 2..], &[1.0, 1.0]);
        assert!((trapezoid(&pts) - auroc_binary(&s, &l).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn every_class_renders() {
    for label in 0..5 {
        let p = Patient::generate(label, 11).unwrap();
        let n = p.ct_size() * p.ct_size();
        assert_eq!(p.ct_rgba(true).len(), 4 * n);
        assert!(p.tile_count() > 0);
        let t = p.tile_rgba(0, false).unwrap();
        assert_eq!(t.len(), 4 * p.tile_size() * p.tile_size());
        assert!(!p.summary().is_empty());
    }
    assert!(Patient::generate(5, 0).is_err());
}

#[test]
fn normalized_tile_follows_reference_stains() {
    let p = Patient::generate(0, 3).unwrap();
    let reference = lungfuse::preprocess::StainReference::standard().stain_matrix;
    for i in 0..p.tile_count().min(4) {
        let est = estimate_stains(&p.normalized_tile(i).unwrap()).unwrap();
        for (s, r) in est.stains.iter().zip(&reference) {
            assert!(angle_between(s, r) < 0.05, "tile {i}");
        }
    }
}

#[test]
fn roc_comparison_behaves() {
    let same = RocComparison::simulate(40, 60, 1.0, 1.0, 1.0, 5).unwrap();
    assert!(same.degenerate());
    assert_eq!(same.p_value(), 1.0);
    let apart = RocComparison::simulate(150, 150, 3.0, 0.0, 0.0, 5).unwrap();
    assert!(apart.auc_a() > 0.9 && (apart.auc_b() - 0.5).abs() < 0.15);
    assert!(apart.p_value() < 1e-6);
    assert!((trapezoid(&apart.curve_a()) - apart.auc_a()).abs() < 1e-12);
    assert!(RocComparison::simulate(10, 10, 1.0, 1.0, 1.5, 0).is_err());
}
