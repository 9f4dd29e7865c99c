use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::Vocabulary;
use crate::model::{LrTransformer, ModelConfig};
use crate::numerics::{load_params, save_params, ManifestEntry, ParamStore};

pub const BLOB_FILE: &str = "checkpoint.bin";
pub const SIDECAR_FILE: &str = "checkpoint.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    vocab_hash: String,
    epoch: usize,
    params: Vec<ManifestEntry>,
}

/// A trained model with its parameters and vocabulary.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LrTransformer,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub epoch: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    epoch: usize,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let params = save_params(store, &dir.join(BLOB_FILE))?;
    let sidecar = Sidecar { model: config.clone(), vocab_hash: vocab.hash(), epoch, params };
    fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)?)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(())
}

/// Loads a checkpoint directory, refusing a vocabulary whose hash differs
/// from the one recorded at training time.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let sidecar_path = dir.join(SIDECAR_FILE);
    if !sidecar_path.is_file() {
        return Err(TrainError::MissingCheckpoint(dir.to_path_buf()));
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let found = vocab.hash();
    if found != sidecar.vocab_hash {
        return Err(TrainError::VocabMismatch { expected: sidecar.vocab_hash, found });
    }
    let store = load_params(&sidecar.params, &dir.join(BLOB_FILE))?;
    let model = LrTransformer::bind(sidecar.model, &store)?;
    Ok(Checkpoint { model, store, vocab, epoch: sidecar.epoch })
}
