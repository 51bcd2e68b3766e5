//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    /// File name within the run directory to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    pub versions: BTreeMap<String, String>,
    /// False until every artifact has been written.
    pub complete: bool,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Single writer for one run directory. The manifest is rewritten after every
/// artifact, so an interrupted run leaves an accurate but incomplete inventory.
pub struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl RunDir {
    pub fn create(path: &Path, command: &str, config_hash: String) -> Result<Self> {
        if path.join(MANIFEST).exists() {
            if let Ok(m) = RunManifest::read(path) {
                if m.complete {
                    bail!("{} already holds a completed run; choose a new --out", path.display());
                }
            }
            log::warn!("reusing incomplete run directory {}", path.display());
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let versions = [
            ("crowdcal".to_string(), crowdcal::VERSION.to_string()),
            ("crowdcal-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]
        .into();
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut dir = RunDir {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash,
                artifacts: BTreeMap::new(),
                started_unix,
                elapsed_seconds: 0.0,
                versions,
                complete: false,
            },
            clock: Instant::now(),
        };
        dir.save_manifest()?;
        Ok(dir)
    }

    fn save_manifest(&mut self) -> Result<()> {
        self.manifest.elapsed_seconds = self.clock.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path.join(MANIFEST), text + "\n").context("writing manifest")
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if name == MANIFEST || self.manifest.artifacts.contains_key(name) {
            bail!("artifact {name} written twice");
        }
        let path = self.path.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest
            .artifacts
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        log::info!("wrote {}", path.display());
        self.save_manifest()
    }

    /// Render into a buffer with `f`, then write it as `name`.
    pub fn write_with<E>(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<()>
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write(name, &buf)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.complete = true;
        self.save_manifest()?;
        Ok(self.manifest)
    }
}
