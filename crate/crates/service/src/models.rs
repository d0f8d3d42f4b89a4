use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use tokio::sync::Mutex;

use convctl_core::evalgen::{EvalError, LoadedModel};
use convctl_core::model::{count_params, Variant};
use convctl_core::train::MODEL_FILE;

/// A loaded model and its compute lane. The lane is a fair (FIFO) mutex, so
/// inference requests against one model run one at a time in arrival order.
#[derive(Debug)]
pub struct ModelSlot {
    pub model: Arc<LoadedModel>,
    pub lane: Mutex<()>,
}

#[derive(Debug, Default)]
pub struct ModelRegistry {
    slots: BTreeMap<String, Arc<ModelSlot>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub variant: Variant,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub parameters: usize,
}

impl ModelRegistry {
    /// Every subdirectory of `dir` holding a `model.ckpt` becomes a model
    /// named after the subdirectory; `dir` itself counts too.
    pub fn load_dir(dir: &Path) -> Result<Self, EvalError> {
        let mut reg = Self::default();
        let mut candidates = Vec::new();
        if dir.join(MODEL_FILE).is_file() {
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "default".into());
            candidates.push((id, dir.to_path_buf()));
        }
        if let Ok(entries) = std::fs::read_dir(dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.join(MODEL_FILE).is_file() {
                    candidates.push((entry.file_name().to_string_lossy().into_owned(), path));
                }
            }
        }
        for (id, path) in candidates {
            let model = LoadedModel::load_dir(&path)?;
            tracing::info!(model_id = %id, path = %path.display(), "loaded model");
            reg.insert(id, model);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, id: impl Into<String>, model: LoadedModel) {
        self.slots.insert(
            id.into(),
            Arc::new(ModelSlot {
                model: Arc::new(model),
                lane: Mutex::new(()),
            }),
        );
    }

    pub fn get(&self, id: &str) -> Option<Arc<ModelSlot>> {
        self.slots.get(id).cloned()
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.slots
            .iter()
            .map(|(id, slot)| {
                let c = &slot.model.config;
                ModelInfo {
                    model_id: id.clone(),
                    variant: c.variant,
                    hidden_size: c.hidden_size,
                    num_layers: c.num_layers,
                    num_heads: c.num_heads,
                    vocab_size: c.vocab_size,
                    max_positions: c.max_positions,
                    parameters: count_params(c),
                }
            })
            .collect()
    }
}
