use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

/// Everything needed to resume or evaluate a model: configuration, the
/// vocabulary it was trained with, parameters, and optionally the optimizer.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: Parameters,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    path: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    path: String,
    m_offset: u64,
    v_offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerSection {
    t: u64,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    vocab: Vocab,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerSection>,
}

fn push_floats(blob: &mut Vec<u8>, xs: &[f64]) -> (u64, u64) {
    let offset = blob.len() as u64;
    for x in xs {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    (offset, xs.len() as u64)
}

fn read_floats(blob: &[u8], offset: u64, len: u64, what: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    let bytes = (len as usize)
        .checked_mul(8)
        .ok_or_else(|| Error::Data(format!("checkpoint: {what} length overflows")))?;
    let end = start
        .checked_add(bytes)
        .ok_or_else(|| Error::Data(format!("checkpoint: {what} offset overflows")))?;
    if end > blob.len() {
        return Err(Error::Data(format!(
            "checkpoint: {what} spans bytes {start}..{end} but the blob holds {}",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the manifest and the single parameter blob under `dir`. Both files
/// land via temp-write plus rename; the manifest goes last, so a checkpoint
/// with a readable manifest always has its full blob.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (path, tensor) in ck.params.iter() {
        let (offset, len) = push_floats(&mut blob, tensor.data());
        entries.push(ParamEntry {
            path: path.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len,
        });
    }
    let optimizer = ck.optimizer.as_ref().map(|adam| {
        let moments = adam
            .moment_entries()
            .map(|(path, m, v)| {
                let (m_offset, len) = push_floats(&mut blob, m);
                let (v_offset, _) = push_floats(&mut blob, v);
                MomentEntry { path: path.to_string(), m_offset, v_offset, len }
            })
            .collect();
        let cfg = adam.config();
        OptimizerSection {
            t: adam.t(),
            alpha: cfg.alpha,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            moments,
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: ck.model.clone(),
        vocab: ck.vocab.clone(),
        params: entries,
        optimizer,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Data(format!("checkpoint manifest encode: {e}")))?;
    write_atomically(&dir.join(BLOB_FILE), &blob)?;
    write_atomically(&dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read(&manifest_path).map_err(|e| {
        Error::Data(format!("checkpoint: cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Data(format!("checkpoint: bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint: format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| {
        Error::Data(format!("checkpoint: cannot read {}: {e}", blob_path.display()))
    })?;

    let mut entries = BTreeMap::new();
    for e in &manifest.params {
        let data = read_floats(&blob, e.offset, e.len, &e.path)?;
        let tensor = Tensor::new(e.shape.clone(), data).map_err(|err| {
            Error::Data(format!("checkpoint: parameter {}: {err}", e.path))
        })?;
        entries.insert(e.path.clone(), tensor);
    }
    let params = Parameters::from_entries(entries);
    params.check_against(&manifest.model).map_err(|e| {
        Error::Data(format!("checkpoint does not match its model config: {e}"))
    })?;

    let optimizer = match manifest.optimizer {
        None => None,
        Some(o) => {
            let cfg = AdamConfig {
                alpha: o.alpha,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            };
            let mut moments = Vec::new();
            for m in &o.moments {
                let first = read_floats(&blob, m.m_offset, m.len, &m.path)?;
                let second = read_floats(&blob, m.v_offset, m.len, &m.path)?;
                let want = params.get(&m.path).map_err(|e| {
                    Error::Data(format!("checkpoint optimizer: {e}"))
                })?;
                if first.len() != want.len() {
                    return Err(Error::Data(format!(
                        "checkpoint optimizer: moments for {} hold {} values, parameter holds {}",
                        m.path,
                        first.len(),
                        want.len()
                    )));
                }
                moments.push((m.path.clone(), first, second));
            }
            Some(AdamState::restore(cfg, o.t, moments)?)
        }
    };

    Ok(Checkpoint {
        model: manifest.model,
        vocab: manifest.vocab,
        params,
        optimizer,
    })
}
