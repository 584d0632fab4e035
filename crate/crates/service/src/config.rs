//! Service configuration and the immutable model registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use branchgan::{load_checkpoint, Encoder, Generator, Network};
use serde::{Deserialize, Serialize};

/// One `[[models]]` entry of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    /// Relative paths resolve against the config file's directory.
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Edit jobs that may wait behind the running one.
    pub queue_capacity: usize,
    pub models: Vec<ModelEntry>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            queue_capacity: 16,
            models: Vec::new(),
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML config and resolves checkpoint paths relative to it.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            if m.checkpoint.is_relative() {
                m.checkpoint = base.join(&m.checkpoint);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.queue_capacity == 0 {
            return Err("queue_capacity must be at least 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if m.id.is_empty() || !seen.insert(&m.id) {
                return Err(format!("model id '{}' is empty or duplicated", m.id));
            }
        }
        Ok(())
    }
}

/// Public description of a loaded model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub id: String,
    pub checkpoint: PathBuf,
    pub stage: usize,
    pub resolution: (usize, usize),
    pub branch_dims: Vec<usize>,
    pub channels: usize,
    pub has_encoder: bool,
}

/// A read-only snapshot shared by every request.
pub struct LoadedModel {
    pub handle: ModelHandle,
    pub generator: Generator,
    pub encoder: Option<Encoder>,
}

pub type Registry = Arc<BTreeMap<String, Arc<LoadedModel>>>;

pub fn load_models(entries: &[ModelEntry]) -> branchgan::Result<Registry> {
    let mut map = BTreeMap::new();
    for e in entries {
        let ck = load_checkpoint(&e.checkpoint)
            .map_err(|err| branchgan::Error::Checkpoint(format!("{}: {err}", e.checkpoint.display())))?;
        let generator = ck.generator()?;
        let encoder = ck.encoder()?;
        let cfg = generator.config();
        let handle = ModelHandle {
            id: e.id.clone(),
            checkpoint: e.checkpoint.clone(),
            stage: generator.stage(),
            resolution: generator.resolution(),
            branch_dims: cfg.subvector_dims.clone(),
            channels: cfg.output_channels,
            has_encoder: encoder.is_some(),
        };
        map.insert(
            e.id.clone(),
            Arc::new(LoadedModel {
                handle,
                generator,
                encoder,
            }),
        );
    }
    Ok(Arc::new(map))
}
