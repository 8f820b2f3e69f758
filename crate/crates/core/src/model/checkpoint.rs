use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{NamedTensor, ParamStore};
use super::parser::{ParserConfig, ParserModel, Vocab};
use super::ModelError;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ParserConfig,
    vocab: Vocab,
    heads: Vec<String>,
    active_head: String,
    params: Vec<NamedTensor>,
}

/// Writes the model as JSON. Floats round-trip exactly.
pub fn save_checkpoint(model: &ParserModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let ck = Checkpoint {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        heads: model.heads().to_vec(),
        active_head: model.active_head().to_string(),
        params: model.params().to_tensors(),
    };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParserModel, ModelError> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    let params = ParamStore::from_tensors(ck.params).map_err(ModelError::Checkpoint)?;
    let model = ParserModel::from_parts(ck.config, ck.vocab, params, ck.heads, ck.active_head);
    model.check_head(model.active_head())?;
    Ok(model)
}
