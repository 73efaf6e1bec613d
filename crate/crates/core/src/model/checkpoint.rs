use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::preprocess::MetadataStats;

use super::config::{ModelConfig, CLASS_NAMES};
use super::DualModalModel;

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Ct,
    He,
    Fusion,
}

/// JSON sidecar stored next to the parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub metadata_stats: Option<MetadataStats>,
    pub seed: u64,
    pub best_epoch: Option<usize>,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, config: ModelConfig, seed: u64) -> Self {
        Self {
            stage,
            config,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            metadata_stats: None,
            seed,
            best_epoch: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write parameters to `path` and the sidecar to `path` with a `.json`
/// extension.
pub fn save_checkpoint(path: &Path, model: &DualModalModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    if meta.config != model.config {
        return Err(Error::invalid("sidecar config differs from the model config"));
    }
    model.params.save(path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DualModalModel<f32>, CheckpointMeta)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingFile(side));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: side.clone(),
        message: e.to_string(),
    })?;
    let params = ParamSet::<f32>::load(path)?;
    let model = DualModalModel::from_parts(meta.config.clone(), params).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dsm");
        let model = DualModalModel::<f32>::init(ModelConfig::default(), 4).unwrap();
        let mut meta = CheckpointMeta::new(Stage::Ct, model.config.clone(), 4);
        meta.metadata_stats = Some(MetadataStats {
            mean: [60.0, 0.5, 1.0],
            std: [8.0, 0.5, 0.8],
        });
        save_checkpoint(&p, &model, &meta).unwrap();
        let (back, bmeta) = load_checkpoint(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(bmeta, meta);
        assert_eq!(bmeta.class_names.len(), 5);
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.dsm")),
            Err(Error::MissingFile(_))
        ));
    }
}
