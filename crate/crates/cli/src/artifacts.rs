//! Artifact I/O: atomic writes, checkpoint provenance meta, and the
//! records that form the run's artifact DAG.

use crate::error::CliError;
use crate::report::ArtifactRecord;
use mergeguard::hashing::{hash64, hex16};
use mergeguard::params::{save_checkpoint, ParamSet};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Serializes `value` as pretty JSON and writes it via temp-then-rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::stage("serialize", e))?;
    write_bytes_atomic(path, &bytes)
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::stage("write", format!("{}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::stage("write", format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::stage("write", format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Tracks every artifact written under one root so the report can record
/// the DAG of relative paths, content hashes and parent hashes.
pub struct ArtifactLog {
    root: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl ArtifactLog {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), records: Vec::new() }
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Saves a checkpoint with provenance meta (config hash + parents) and
    /// records it. Returns the checkpoint's own fingerprint hex.
    pub fn save_checkpoint(
        &mut self,
        params: &mut ParamSet,
        path: &Path,
        config_hash: &str,
        parents: &[String],
    ) -> Result<String, CliError> {
        params.set_meta("config_hash", config_hash);
        params.set_meta("parents", parents.join(","));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::stage("checkpoint", format!("{}: {e}", parent.display())))?;
        }
        save_checkpoint(params, path).map_err(|e| CliError::stage("checkpoint", e))?;
        let hash = hex16(params.fingerprint());
        self.records.push(ArtifactRecord {
            path: self.relative(path),
            kind: "checkpoint".into(),
            hash: hash.clone(),
            parents: parents.to_vec(),
        });
        Ok(hash)
    }

    pub fn record_file(
        &mut self,
        path: &Path,
        kind: &str,
        parents: &[String],
    ) -> Result<String, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::stage("hash", format!("{}: {e}", path.display())))?;
        let hash = hex16(hash64(&bytes));
        self.records.push(ArtifactRecord {
            path: self.relative(path),
            kind: kind.to_string(),
            hash: hash.clone(),
            parents: parents.to_vec(),
        });
        Ok(hash)
    }

    pub fn into_records(self) -> Vec<ArtifactRecord> {
        self.records
    }
}
