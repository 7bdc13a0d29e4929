//! Per-command run directory and its write-once manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_digest: String,
    pub config: CliConfig,
    pub dataset_digest: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: RunStatus,
    pub artifacts: BTreeMap<String, Artifact>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// An open run: a fresh directory under the output root plus the bookkeeping
/// to write its manifest at the end.
pub struct Run {
    pub id: String,
    pub dir: PathBuf,
    command: String,
    config: CliConfig,
    dataset_digest: Option<String>,
    started: u128,
    artifacts: BTreeMap<String, Artifact>,
    notes: Vec<String>,
}

impl Run {
    /// Creates `root/{command}-{label}-{config digest prefix}`, adding a
    /// numeric suffix if that id is taken.
    pub fn create(root: &Path, command: &str, label: &str, config: &CliConfig) -> Result<Self, CliError> {
        let base = format!("{command}-{}-{}", slug(label), &config.digest()[..8]);
        std::fs::create_dir_all(root).map_err(|e| CliError::failed(format!("{}: {e}", root.display())))?;
        for n in 1.. {
            let id = if n == 1 { base.clone() } else { format!("{base}-{n}") };
            let dir = root.join(&id);
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok(Self::in_dir(id, dir, command, config)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::failed(format!("{}: {e}", dir.display()))),
            }
        }
        unreachable!()
    }

    /// Uses a directory chosen by the caller (sweep cells).
    pub fn at(dir: &Path, command: &str, config: &CliConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::failed(format!("{}: {e}", dir.display())))?;
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::in_dir(id, dir.to_path_buf(), command, config))
    }

    fn in_dir(id: String, dir: PathBuf, command: &str, config: &CliConfig) -> Self {
        Self {
            id,
            dir,
            command: command.into(),
            config: config.clone(),
            dataset_digest: None,
            started: now_ms(),
            artifacts: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn set_dataset_digest(&mut self, digest: String) {
        self.dataset_digest = Some(digest);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Registers a file already written inside the run directory.
    pub fn artifact(&mut self, name: &str, file: &Path) -> Result<(), CliError> {
        let rel = file.strip_prefix(&self.dir).unwrap_or(file).to_string_lossy().into_owned();
        self.artifacts.insert(
            name.into(),
            Artifact {
                path: rel,
                sha256: sha256_file(file)?,
            },
        );
        Ok(())
    }

    /// Writes `bytes` to `file` in the run directory and registers it.
    pub fn write(&mut self, name: &str, file: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(file);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::failed(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
        self.artifact(name, &path)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, file: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
        bytes.push(b'\n');
        self.write(name, file, &bytes)
    }

    /// Writes the manifest; refuses to replace an existing one.
    pub fn finish(self, status: RunStatus) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            run_id: self.id,
            command: self.command,
            config_digest: self.config.digest(),
            config: self.config,
            dataset_digest: self.dataset_digest,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            status,
            artifacts: self.artifacts,
            notes: self.notes,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let err = |e: &dyn std::fmt::Display| CliError::failed(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| err(&e))?;
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        tmp.write_all(&bytes).map_err(|e| err(&e))?;
        tmp.persist_noclobber(&path).map_err(|e| err(&e.error))?;
        Ok(manifest)
    }
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::missing(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))
}

fn slug(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let out = out.trim_matches('-').to_string();
    if out.is_empty() {
        "run".into()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_manifests_write_once() {
        let root = tempfile::tempdir().unwrap();
        let cfg = CliConfig::default();
        let a = Run::create(root.path(), "train", "Horse", &cfg).unwrap();
        let b = Run::create(root.path(), "train", "Horse", &cfg).unwrap();
        assert_ne!(a.id, b.id);
        assert!(b.id.ends_with("-2"));
        let dir = a.dir.clone();
        a.finish(RunStatus::Ok).unwrap();
        let again = Run::at(&dir, "train", &cfg).unwrap();
        assert!(again.finish(RunStatus::Ok).is_err());
        assert_eq!(read_run_manifest(&dir).unwrap().status, RunStatus::Ok);
    }
}
