//! On-disk checkpoints: `manifest.json` plus one MMT1 file per weight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::memmamba::{MemMamba, ModelConfig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "memmamba-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub weights: Vec<WeightEntry>,
}

fn file_name(name: &str) -> String {
    format!("{name}.mmt")
}

pub fn save(model: &MemMamba, step: usize, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    for (_, name, t) in model.params().iter() {
        let file = file_name(name);
        fs::write(dir.join(&file), t.to_mmt_bytes())?;
        weights.push(WeightEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        config: model.config().clone(),
        seed: model.config().seed,
        step,
        weights,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(MemMamba, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
    }
    let mut store = ParamStore::new();
    for w in &manifest.weights {
        let bytes = fs::read(dir.join(&w.file))?;
        let t = Tensor::read_mmt(bytes.as_slice())?;
        if t.shape() != w.shape.as_slice() {
            return Err(Error::Format(format!(
                "`{}` has shape {:?} on disk, manifest says {:?}",
                w.name,
                t.shape(),
                w.shape
            )));
        }
        store.insert(w.name.clone(), t);
    }
    let model = MemMamba::from_parts(manifest.config.clone(), store)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 4,
            d_state: 3,
            d_sum: 3,
            d_attn: 2,
            vocab: 7,
            ..ModelConfig::default()
        };
        let m = MemMamba::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&m, 17, dir.path()).unwrap();
        let (back, man) = load(dir.path()).unwrap();
        assert_eq!(man.step, 17);
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn missing_checkpoint_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Input(_))));
    }
}
