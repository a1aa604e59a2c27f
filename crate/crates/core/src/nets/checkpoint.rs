//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! blob per parameter, named by parameter path.

use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::Module;
use super::{Model, ModelConfig};
use crate::rng::Rng;
use crate::sample::{read_f32, write_f32};

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, as a decimal string (it is a 128-bit value).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> io::Result<Rng> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub iteration: u64,
    /// True only for the last iteration of a completed run.
    pub is_final: bool,
    pub rng: Option<RngState>,
    /// SHA-256 over parameter names and values, see [`param_hash`].
    pub hash: String,
    pub params: Vec<ParamEntry>,
}

/// Digest of every parameter's path and little-endian `f32` bytes in visit order.
pub fn param_hash(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    model.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        h.update([0u8]);
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn save(model: &Model<f32>, dir: &Path, iteration: u64, is_final: bool, rng: Option<RngState>) -> io::Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    let mut result = Ok(());
    model.visit("", &mut |name, p| {
        if result.is_ok() {
            result = write_f32(&dir.join(format!("{name}.f32")), p.value.iter().copied());
        }
        params.push(ParamEntry { name: name.to_string(), shape: p.shape.clone() });
    });
    result?;
    let manifest = CheckpointManifest { model: model.cfg.clone(), iteration, is_final, rng, hash: param_hash(model), params };
    let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> io::Result<CheckpointManifest> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", dir.display())))
}

/// Rebuilds the model bit-exactly and checks the stored hash.
pub fn load(dir: &Path) -> io::Result<(Model<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<f32>::new(&manifest.model, 0);
    let mut result = Ok(());
    let mut expected = manifest.params.iter();
    model.visit_mut("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        match expected.next() {
            Some(e) if e.name == name && e.shape == p.shape => {}
            _ => {
                result = Err(bad(format!("parameter `{name}` does not match the manifest")));
                return;
            }
        }
        match read_f32(&dir.join(format!("{name}.f32"))) {
            Ok(v) if v.len() == p.len() => p.value = v,
            Ok(_) => result = Err(bad(format!("parameter `{name}` has the wrong length"))),
            Err(e) => result = Err(e),
        }
    });
    result?;
    if param_hash(&model) != manifest.hash {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "checkpoint hash mismatch"));
    }
    Ok((model, manifest))
}
