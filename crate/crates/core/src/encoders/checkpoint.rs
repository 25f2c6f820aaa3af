use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::model::ModelState;
use crate::container::{self, TensorRef};
use crate::diffcore::ParamStore;
use crate::error::Result;

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: EncoderConfig,
}

impl ModelState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<TensorRef> = self
            .params
            .iter()
            .map(|(name, value)| TensorRef {
                name: name.to_string(),
                value,
                trainable: Some(self.params.is_trainable(name)),
            })
            .collect();
        container::encode(
            CHECKPOINT_KIND,
            &CheckpointMeta {
                config: self.config.clone(),
            },
            &tensors,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors): (CheckpointMeta, _) = container::decode(bytes, CHECKPOINT_KIND)?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        for (entry, value) in tensors {
            params.insert(entry.name, value, entry.trainable.unwrap_or(true))?;
        }
        Ok(Self {
            config: meta.config,
            params,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn file_hash(&self) -> Result<String> {
        Ok(container::sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
