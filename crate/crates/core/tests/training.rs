use lungfuse::cli::RunConfig;
use lungfuse::model::DualModalModel;
use lungfuse::preprocess::StainReference;
use lungfuse::seed;
use lungfuse::synthdata::generate_dataset;
use lungfuse::training::infer::ct_logits;
use lungfuse::training::{prepare_dataset, train_branch, Branch, Predictions, PreparedDataset};

fn setup(patients: usize, epochs: usize) -> (RunConfig, PreparedDataset) {
    let cfg = RunConfig::parse(&format!(
        "seed = 2\npatients = {patients}\nlearning_rate = 0.01\nmax_epochs = {epochs}\n"
    ))
    .unwrap();
    let ds = generate_dataset(&cfg.generator).unwrap();
    let data = prepare_dataset(&ds, &StainReference::standard()).unwrap();
    (cfg, data)
}

fn init(cfg: &RunConfig) -> DualModalModel<f32> {
    DualModalModel::init(cfg.model_config(), seed::derive(cfg.seed, "init")).unwrap()
}

#[test]
fn ct_branch_separates_synthetic_classes() {
    let (cfg, data) = setup(150, 50);
    let out = train_branch(Branch::Ct, init(&cfg), &data, &cfg.train).unwrap();
    let z = ct_logits(&out.model, &data.test).unwrap();
    let pred = Predictions::argmax(&z);
    let correct = pred.iter().zip(&data.test).filter(|(p, t)| **p == t.label).count();
    let acc = correct as f64 / data.test.len() as f64;
    assert!(acc >= 0.9, "CT test accuracy {acc:.3}");
    assert_eq!(out.history.best_epoch(), out.best_epoch);
    assert_eq!(out.history.0.iter().filter(|r| r.is_best).count(), 1);
}

#[test]
fn branch_training_is_deterministic() {
    let (cfg, data) = setup(40, 2);
    let a = train_branch(Branch::He, init(&cfg), &data, &cfg.train).unwrap();
    let b = train_branch(Branch::He, init(&cfg), &data, &cfg.train).unwrap();
    assert_eq!(a.model.params.digest(), b.model.params.digest());
    assert_eq!(a.history, b.history);
    assert_ne!(a.model.params.digest(), init(&cfg).params.digest());
}
