//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::attribution::AttributionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::{CorruptionRegime, GeneratorConfig};
use crate::training::TrainConfig;

/// Everything a run needs. One `seed` drives generation, initialization,
/// training and attribution through named sub-seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    /// Test patients explained when no single patient is requested.
    pub explain_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            explain_limit: 20,
        };
        c.propagate_seed();
        c
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "patients",
    "proportions",
    "ct_size",
    "tile_size",
    "tiles_per_slide",
    "ct_noise_hu",
    "he_noise",
    "smoker_prob_high",
    "smoker_prob_low",
    "corruption_probability",
    "split_ratios",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "dropout",
    "weight_decay",
    "patience",
    "augment",
    "mixup_alpha",
    "cutmix_alpha",
    "mixup_prob",
    "smoothgrad_samples",
    "smoothgrad_sigma",
    "ig_steps",
    "occlusion_patch",
    "occlusion_stride",
    "insertion_steps",
    "blur_sigma",
    "cam_layer",
    "explain_limit",
];

fn scalar<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("`{key}`: cannot parse `{value}`"),
    })
}

fn list<const N: usize>(line: usize, key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| scalar(line, key, s.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Config {
        line,
        message: format!("`{key}` needs {N} comma-separated numbers"),
    })
}

impl RunConfig {
    fn propagate_seed(&mut self) {
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.attribution.seed = self.seed;
    }

    /// Architecture with the configured dropout before both branch heads.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::default();
        m.ct.dropout = self.train.dropout;
        m.tile.dropout = self.train.dropout;
        m.ct.image_size = self.generator.ct_size;
        m.tile.image_size = self.generator.tile_size;
        m
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        let t = &mut self.train;
        let a = &mut self.attribution;
        match key {
            "seed" => self.seed = scalar(line, key, value)?,
            "patients" => g.patients = scalar(line, key, value)?,
            "proportions" => g.proportions = list(line, key, value)?,
            "ct_size" => g.ct_size = scalar(line, key, value)?,
            "tile_size" => g.tile_size = scalar(line, key, value)?,
            "tiles_per_slide" => g.tiles_per_slide = scalar(line, key, value)?,
            "ct_noise_hu" => g.ct_noise_hu = scalar(line, key, value)?,
            "he_noise" => g.he_noise = scalar(line, key, value)?,
            "smoker_prob_high" => g.smoker_prob_high = scalar(line, key, value)?,
            "smoker_prob_low" => g.smoker_prob_low = scalar(line, key, value)?,
            "corruption_probability" => {
                let p: f64 = scalar(line, key, value)?;
                g.corruption = (p > 0.0).then_some(CorruptionRegime { probability: p });
            }
            "split_ratios" => g.split_ratios = list(line, key, value)?,
            "learning_rate" => t.learning_rate = scalar(line, key, value)?,
            "batch_size" => t.batch_size = scalar(line, key, value)?,
            "max_epochs" => t.max_epochs = scalar(line, key, value)?,
            "dropout" => t.dropout = scalar(line, key, value)?,
            "weight_decay" => t.weight_decay = scalar(line, key, value)?,
            "patience" => t.patience = scalar(line, key, value)?,
            "augment" => t.augment = scalar(line, key, value)?,
            "mixup_alpha" => t.mixup_alpha = scalar(line, key, value)?,
            "cutmix_alpha" => t.cutmix_alpha = scalar(line, key, value)?,
            "mixup_prob" => t.mixup_prob = scalar(line, key, value)?,
            "smoothgrad_samples" => a.smoothgrad_samples = scalar(line, key, value)?,
            "smoothgrad_sigma" => a.smoothgrad_sigma = scalar(line, key, value)?,
            "ig_steps" => a.ig_steps = scalar(line, key, value)?,
            "occlusion_patch" => a.occlusion_patch = scalar(line, key, value)?,
            "occlusion_stride" => a.occlusion_stride = scalar(line, key, value)?,
            "insertion_steps" => a.insertion_steps = scalar(line, key, value)?,
            "blur_sigma" => a.blur_sigma = scalar(line, key, value)?,
            "cam_layer" => a.cam_layer = value.to_string(),
            "explain_limit" => self.explain_limit = scalar(line, key, value)?,
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(line, key, value)?;
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config {
            line: 0,
            message: e.to_string(),
        };
        self.generator.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.model_config().validate().map_err(wrap)?;
        let a = &self.attribution;
        if a.smoothgrad_samples == 0 || a.ig_steps == 0 || a.insertion_steps == 0 || a.occlusion_stride == 0 {
            return Err(wrap(Error::invalid(
                "attribution sample and step counts must be positive",
            )));
        }
        if !(a.smoothgrad_sigma >= 0.0 && a.blur_sigma >= 0.0) {
            return Err(wrap(Error::invalid("attribution sigmas must be nonnegative")));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let a = &self.attribution;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("patients", g.patients.to_string()),
            ("proportions", join(&g.proportions)),
            ("ct_size", g.ct_size.to_string()),
            ("tile_size", g.tile_size.to_string()),
            ("tiles_per_slide", g.tiles_per_slide.to_string()),
            ("ct_noise_hu", g.ct_noise_hu.to_string()),
            ("he_noise", g.he_noise.to_string()),
            ("smoker_prob_high", g.smoker_prob_high.to_string()),
            ("smoker_prob_low", g.smoker_prob_low.to_string()),
            (
                "corruption_probability",
                g.corruption.map_or(0.0, |c| c.probability).to_string(),
            ),
            ("split_ratios", join(&g.split_ratios)),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("dropout", t.dropout.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("patience", t.patience.to_string()),
            ("augment", t.augment.to_string()),
            ("mixup_alpha", t.mixup_alpha.to_string()),
            ("cutmix_alpha", t.cutmix_alpha.to_string()),
            ("mixup_prob", t.mixup_prob.to_string()),
            ("smoothgrad_samples", a.smoothgrad_samples.to_string()),
            ("smoothgrad_sigma", a.smoothgrad_sigma.to_string()),
            ("ig_steps", a.ig_steps.to_string()),
            ("occlusion_patch", a.occlusion_patch.to_string()),
            ("occlusion_stride", a.occlusion_stride.to_string()),
            ("insertion_steps", a.insertion_steps.to_string()),
            ("blur_sigma", a.blur_sigma.to_string()),
            ("cam_layer", a.cam_layer.clone()),
            ("explain_limit", self.explain_limit.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.max_epochs, 50);
        assert_eq!(c.train.dropout, 0.5);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.generator.patients, 500);
    }

    #[test]
    fn parses_comments_and_values() {
        let c = RunConfig::parse(
            "# run\nseed = 7\nlearning_rate = 0.01 # fast\n\naugment = false\ncorruption_probability = 0.8\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.generator.seed, 7);
        assert_eq!(c.train.learning_rate, 0.01);
        assert!(!c.train.augment);
        assert_eq!(c.generator.corruption, Some(CorruptionRegime { probability: 0.8 }));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("seed = 1\nlearning_rte = 0.1\n").unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("learning_rte"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(RunConfig::parse("seed 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("seed = x"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(RunConfig::parse("batch_size = 0").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let c = RunConfig::parse("seed = 3\nproportions = 0.2, 0.2, 0.2, 0.2, 0.2\ncam_layer = block2\n").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
