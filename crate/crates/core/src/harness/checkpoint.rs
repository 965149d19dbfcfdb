//! Versioned checkpoint container: a TOML metadata block (step counter,
//! decay factors, trainer RNG position, embedded config) followed by a
//! named-tensor index holding parameters and optimizer moments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stsr_tensor::Tensor;

use crate::container::{read_file, write_file, ByteReader, ByteWriter, FormatError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"C3CK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub alpha: f32,
    pub beta: f32,
    pub adam_steps: u64,
    pub rng_seed: u64,
    /// ChaCha word position, decimal-encoded (u128 exceeds TOML integers).
    pub rng_word_pos: String,
    pub fingerprint: String,
    pub config_toml: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(&CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    let meta = toml::to_string(&ck.meta).expect("meta serializes");
    w.string(&meta);
    w.u32(ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        w.string(name);
        w.tensor(t);
    }
    w.into_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(&CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let meta_text = r.string()?;
    let meta: CheckpointMeta = toml::from_str(&meta_text)
        .map_err(|e| FormatError::Corrupt(format!("metadata block: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let t = r.tensor()?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), FormatError> {
    write_file(path, &checkpoint_to_bytes(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    checkpoint_from_bytes(&read_file(path)?)
}
