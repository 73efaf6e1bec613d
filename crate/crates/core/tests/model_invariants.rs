mod common;

use std::collections::BTreeMap;

use lungfuse::autodiff::{ParamSet, Tensor};
use lungfuse::model::{argmax, fuse_logits, predict_proba, softmax, DualModalModel, Logits, ModalityWeights, Mode};
use lungfuse::training::{adamw_step, OptimizerState, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use common::{normal_tensor, rng, small_model_config, uniform_tensor};

fn perturbed_model(seed: u64) -> DualModalModel<f64> {
    let mut m = DualModalModel::<f64>::init(small_model_config(), seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for (_, t) in m.params.iter_mut() {
        for v in t.values_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += 0.3 * z;
        }
    }
    m
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fused_logits_stay_between_branches(a in logits(), b in logits(), w in 0.0f64..=1.0) {
        let fused = fuse_logits(&Logits(a.clone()), &Logits(b.clone()), &ModalityWeights::new(w, 1.0 - w).unwrap()).unwrap();
        for ((f, x), y) in fused.0.iter().zip(&a).zip(&b) {
            prop_assert!(*f >= x.min(*y) - 1e-12 && *f <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_shifts(z in logits(), c in -500.0f64..500.0) {
        let p = softmax(&z);
        let q = softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn bag_prediction_ignores_tile_order(seed in 0u64..10_000, n in 1usize..6) {
        let m = perturbed_model(seed % 7);
        let s = m.config.tile.image_size;
        let mut r = rng(seed);
        let tiles = uniform_tensor(&mut r, &[n, 3, s, s], 0.0, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let per = 3 * s * s;
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| tiles.values()[i * per..(i + 1) * per].to_vec()).collect();
        let shuffled = Tensor::new(vec![n, 3, s, s], shuffled).unwrap();
        let (a, f, z) = m.he_bag(tiles, Mode::Eval).unwrap();
        let (a2, f2, z2) = m.he_bag(shuffled, Mode::Eval).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((a2[j] - a[i]).abs() < 1e-6);
        }
        for (x, y) in z.values().iter().zip(z2.values()).chain(f.values().iter().zip(f2.values())) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn fusion_endpoints_recover_each_branch() {
    let mut r = rng(1);
    for _ in 0..200 {
        let a = Logits(normal_tensor(&mut r, &[5], 3.0).into_values());
        let b = Logits(normal_tensor(&mut r, &[5], 3.0).into_values());
        let ct = fuse_logits(&a, &b, &ModalityWeights::new(1.0, 0.0).unwrap()).unwrap();
        let he = fuse_logits(&a, &b, &ModalityWeights::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(ct, a);
        assert_eq!(he, b);
        assert_eq!(argmax(&predict_proba(&ct)), argmax(&a.0));
        assert_eq!(argmax(&predict_proba(&he)), argmax(&b.0));
    }
}

#[test]
fn invalid_modality_weights_rejected() {
    assert!(ModalityWeights::new(0.7, 0.7).is_err());
    assert!(ModalityWeights::new(-0.1, 1.1).is_err());
    assert!(ModalityWeights::new(f64::NAN, 0.5).is_err());
    let bad = ModalityWeights { w_ct: 2.0, w_he: -1.0 };
    assert!(fuse_logits(&Logits(vec![0.0; 5]), &Logits(vec![0.0; 5]), &bad).is_err());
    assert!(fuse_logits(
        &Logits(vec![0.0; 5]),
        &Logits(vec![0.0; 4]),
        &ModalityWeights::new(0.5, 0.5).unwrap()
    )
    .is_err());
}

#[test]
fn gate_rows_are_convex() {
    for seed in 0..5 {
        let m = perturbed_model(seed);
        let meta = normal_tensor(&mut rng(seed + 50), &[64, 3], 2.0);
        let w = m.gate_batch(meta, Mode::Eval).unwrap();
        for row in w.values().chunks(2) {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gate_starts_balanced() {
    let m = DualModalModel::<f64>::init(small_model_config(), 3).unwrap();
    let w = m
        .gate_batch(normal_tensor(&mut rng(4), &[8, 3], 1.0), Mode::Eval)
        .unwrap();
    assert!(w.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

#[test]
fn softmax_survives_extreme_logits() {
    let p = softmax(&[1000.0, -1000.0, 999.0]);
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] / p[2] - std::f64::consts::E).abs() < 1e-9);
}

#[test]
fn adamw_matches_three_step_unroll() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let gs = [[1.0, -0.2], [-2.0, 0.0], [0.5, 3.0]];
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![0.3, -1.5])).unwrap();
    let mut state = OptimizerState::default();
    let mut expected = [0.3, -1.5];
    let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.1);
    for t in 1..=3 {
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(gs[t - 1].to_vec()))]);
        adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for (i, e) in expected.iter_mut().enumerate() {
            // Moments written as explicit weighted sums of the gradient history.
            let m: f64 = (1..=t)
                .map(|s| (1.0 - b1) * b1.powi((t - s) as i32) * gs[s - 1][i])
                .sum();
            let v: f64 = (1..=t)
                .map(|s| (1.0 - b2) * b2.powi((t - s) as i32) * gs[s - 1][i].powi(2))
                .sum();
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            *e = *e - lr * mhat / (vhat.sqrt() + eps) - lr * wd * *e;
        }
        let got = params.get("w").unwrap().values();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10, "step {t}: {g} vs {e}");
        }
    }
    assert_eq!(state.t, 3);
}

#[test]
fn adamw_constant_gradient_steps_by_learning_rate() {
    let cfg = TrainConfig {
        learning_rate: 0.05,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![1.0f64])).unwrap();
    let mut state = OptimizerState::default();
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![4.0]))]);
    for step in 1..=10 {
        adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let w = params.get("w").unwrap().values()[0];
        assert!((w - (1.0 - 0.05 * step as f64)).abs() < 1e-8);
    }
}

#[test]
fn adamw_rejects_mismatched_or_nonfinite_gradients() {
    let cfg = TrainConfig::default();
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![1.0f64, 2.0])).unwrap();
    let mut state = OptimizerState::default();
    let short = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0]))]);
    assert!(adamw_step(&mut params, &short, &mut state, &cfg).is_err());
    let nan = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, f64::NAN]))]);
    assert!(adamw_step(&mut params, &nan, &mut state, &cfg).is_err());
    assert_eq!(state.t, 0);
    assert_eq!(params.get("w").unwrap().values(), &[1.0, 2.0]);
}
