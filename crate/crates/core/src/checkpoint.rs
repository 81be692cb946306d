//! Checkpoint directories: a JSON config record, parameter tensors in a
//! bit-exact binary file, and content hashes for determinism checks.

use std::fs;
use std::path::{Path, PathBuf};

use dialogeval_tape::ParamStore;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

// Parameter namespaces, one per model family, so several models can share
// a tape.
pub const ENCODER_NAMESPACE: u32 = 1;
pub const EVALUATOR_NAMESPACE: u32 = 2;
pub const GENERATOR_NAMESPACE: u32 = 3;
pub const RERANKER_NAMESPACE: u32 = 4;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_params(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ParamStore::from_bytes(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over a store's serialized parameters.
pub fn params_hash(store: &ParamStore) -> String {
    sha256_hex(&store.to_bytes())
}

/// Hash of every regular file under `dir`, in sorted relative-path order.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// Fails with [`Error::MissingArtifact`] naming the stage that produces it.
pub fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.to_string(),
        })
    }
}
