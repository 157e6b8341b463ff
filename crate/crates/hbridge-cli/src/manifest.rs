//! Run manifests and output-directory locking.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hbridge_core::{BridgePlan, HbError, Result};
use serde::Serialize;

/// Written atomically at the end of every run that owns an output directory.
#[derive(Serialize, Debug)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_path: Option<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub output_dir: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge_plan: Option<BridgePlan>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let tmp = dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HbError::Internal(format!("manifest serialize: {e}")))?;
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Exclusive lock on an output directory; the lockfile is removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".hbridge.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HbError::Io(
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "output directory {} is locked by another run (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ),
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
