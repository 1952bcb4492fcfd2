//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"LLCKPT\0\x01"
//! u32    format version
//! u64    header length H
//! H      JSON header: metadata, experiment digest, tensor names and shapes
//! ...    f64 tensor data, row-major, in header order
//! 32     SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lifelong_core::corpus::DomainId;
use lifelong_core::model::{Branch, Checkpoint, ModelConfig};
use lifelong_core::Matrix;

use crate::error::{CliError, CliResult};
use crate::fsutil::{atomic_write, read};

const MAGIC: &[u8; 8] = b"LLCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config_digest: String,
    content_digest: String,
    time_step: usize,
    algorithm: String,
    model_config: ModelConfig,
    model_config_digest: String,
    init_seed: u64,
    adapters: Vec<DomainId>,
    expansions: Vec<DomainId>,
    active: Branch,
    step_counter: u64,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint as stored, with the experiment digest it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredCheckpoint {
    pub config_digest: String,
    pub checkpoint: Checkpoint,
}

pub fn encode(ckpt: &Checkpoint, config_digest: &str) -> Vec<u8> {
    let header = Header {
        config_digest: config_digest.into(),
        content_digest: ckpt.content_digest(),
        time_step: ckpt.time_step,
        algorithm: ckpt.algorithm.clone(),
        model_config: ckpt.config.clone(),
        model_config_digest: ckpt.config_digest.clone(),
        init_seed: ckpt.init_seed,
        adapters: ckpt.adapters.clone(),
        expansions: ckpt.expansions.clone(),
        active: ckpt.active.clone(),
        step_counter: ckpt.step_counter,
        tensors: ckpt.tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n_values: usize = ckpt.tensors.iter().map(|(_, m)| m.data().len()).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * n_values + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &ckpt.tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Runtime(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn decode(bytes: &[u8]) -> CliResult<StoredCheckpoint> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic or truncated file"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[20..data_start]).map_err(|e| corrupt(format!("header: {e}")))?;
    let mut data = &body[data_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| corrupt("tensor shape overflows"))?;
        if data.len() < 8 * n {
            return Err(corrupt(format!("tensor `{}` truncated", t.name)));
        }
        let values: Vec<f64> = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        let m = Matrix::from_vec(t.rows, t.cols, values);
        tensors.push((t.name.clone(), m));
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", data.len())));
    }
    let checkpoint = Checkpoint {
        time_step: header.time_step,
        algorithm: header.algorithm,
        config: header.model_config,
        config_digest: header.model_config_digest,
        init_seed: header.init_seed,
        adapters: header.adapters,
        expansions: header.expansions,
        active: header.active,
        step_counter: header.step_counter,
        tensors,
    };
    if checkpoint.content_digest() != header.content_digest {
        return Err(corrupt("content digest mismatch"));
    }
    Ok(StoredCheckpoint { config_digest: header.config_digest, checkpoint })
}

pub fn write(path: &Path, ckpt: &Checkpoint, config_digest: &str) -> CliResult<()> {
    atomic_write(path, &encode(ckpt, config_digest))
}

pub fn read_file(path: &Path) -> CliResult<StoredCheckpoint> {
    decode(&read(path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
