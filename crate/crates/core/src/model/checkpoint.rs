//! Self-describing JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::ModelState;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "attnlens-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    graph_hash: String,
    model: ModelState,
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        graph_hash: model.network().content_hash(),
        model: model.clone(),
    };
    let bytes = serde_json::to_vec(&ckpt)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("not a checkpoint: format {:?}", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    if ckpt.graph_hash != ckpt.model.network().content_hash() {
        return Err(Error::invalid("checkpoint graph hash does not match its graph"));
    }
    ckpt.model.restore()
}
