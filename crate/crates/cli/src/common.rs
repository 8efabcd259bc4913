use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use varm::data::{gen_sprites, load_checkpoint, CheckpointMeta, Dataset, MANIFEST_FILE};
use varm::models::Model;

use crate::fail::{Failure, Outcome};

pub const CONFIG_FILE: &str = "config.json";

/// Which procedural dataset a run used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub sprites: usize,
    pub data_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            sprites: 5000,
            data_seed: 0,
        }
    }
}

impl DataSpec {
    pub fn generate(&self) -> Outcome<Dataset> {
        Ok(gen_sprites(self.sprites, self.data_seed)?)
    }

    /// The data section of a checkpoint's run record, or the defaults.
    pub fn from_meta(meta: &CheckpointMeta) -> Self {
        meta.run
            .as_ref()
            .and_then(|run| serde_json::from_value(run.clone()).ok())
            .unwrap_or_default()
    }
}

pub fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::from(varm::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| {
        varm::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn load_model(dir: &Path) -> Outcome<(Model, CheckpointMeta)> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Failure::missing(format!("no checkpoint found in {}", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

/// Absolute form of `dir` when it exists, used to record artifacts.
pub fn resolved(dir: &Path) -> String {
    fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf()).display().to_string()
}

/// A short identifier for a checkpoint directory.
pub fn model_id(dir: &Path) -> String {
    fs::canonicalize(dir)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into())
}
