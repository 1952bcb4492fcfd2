//! Stage manifests for cached, resumable runs.
//!
//! A stage is complete when `stages/<name>.json` exists, its key matches the
//! key of the current inputs, and every listed output still hashes to the
//! recorded value. Manifests are written last, so an interrupted stage is
//! simply redone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::fsutil::{atomic_write, read, sha256_hex};
use crate::records::{from_document, to_document};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// SHA-256 over the stage name and its input digests.
    pub key: String,
    pub outputs: Vec<OutputEntry>,
}

pub fn stage_key(stage: &str, inputs: &[&str]) -> String {
    let mut s = String::from(stage);
    for i in inputs {
        s.push(';');
        s.push_str(i);
    }
    sha256_hex(s.as_bytes())
}

fn manifest_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join("stages").join(format!("{stage}.json"))
}

/// The manifest when the stage is complete for `key`.
pub fn completed(run_dir: &Path, stage: &str, key: &str) -> Option<Manifest> {
    let bytes = read(&manifest_path(run_dir, stage)).ok()?;
    let doc = from_document::<Manifest>(std::str::from_utf8(&bytes).ok()?).ok()?;
    let m = doc.body;
    if m.key != key {
        return None;
    }
    let intact = m.outputs.iter().all(|o| read(&run_dir.join(&o.path)).is_ok_and(|b| sha256_hex(&b) == o.sha256));
    intact.then_some(m)
}

/// Records a finished stage over outputs already on disk.
pub fn record(run_dir: &Path, stage: &str, key: &str, outputs: &[PathBuf], config_digest: &str) -> CliResult<Manifest> {
    let mut entries = Vec::new();
    for p in outputs {
        entries.push(OutputEntry { path: p.clone(), sha256: sha256_hex(&read(&run_dir.join(p))?) });
    }
    let m = Manifest { stage: stage.into(), key: key.into(), outputs: entries };
    atomic_write(&manifest_path(run_dir, stage), to_document(config_digest, &m).as_bytes())?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_hits_only_on_same_key_and_intact_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        atomic_write(&run.join("x.txt"), b"hello").unwrap();
        let key = stage_key("s", &["a"]);
        assert!(completed(run, "s", &key).is_none());
        record(run, "s", &key, &["x.txt".into()], "dig").unwrap();
        assert!(completed(run, "s", &key).is_some());
        assert!(completed(run, "s", &stage_key("s", &["b"])).is_none());
        atomic_write(&run.join("x.txt"), b"tampered").unwrap();
        assert!(completed(run, "s", &key).is_none());
    }
}
