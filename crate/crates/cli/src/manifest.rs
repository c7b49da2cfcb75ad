//! Run manifest: ties the pipeline's artifacts together so later stages can
//! resolve earlier outputs without repeating paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use influence_lab::store::atomic_write;
use influence_lab::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: PathBuf,
    pub crc32: u32,
    pub created_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Known artifact slots, keyed by kind (`data`, `trajectory`, `loss_matrix`,
/// `gram`, `ssrt`, ...). Loading verifies that every referenced file still
/// exists and matches its recorded checksum.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool_version: String,
    pub entries: BTreeMap<String, ArtifactEntry>,
}

fn file_crc(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        for (kind, entry) in &manifest.entries {
            if !entry.path.exists() {
                return Err(Error::MissingAsset {
                    what: format!("{kind} at {}", entry.path.display()),
                    remediation: format!("re-run the stage that produces `{kind}`"),
                });
            }
            let crc = file_crc(&entry.path)?;
            if crc != entry.crc32 {
                return Err(Error::ChecksumMismatch {
                    stored: entry.crc32,
                    computed: crc,
                });
            }
        }
        Ok(manifest)
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                entries: BTreeMap::new(),
            })
        }
    }

    pub fn record(&mut self, kind: &str, path: &Path, config_hash: Option<String>) -> Result<()> {
        self.entries.insert(
            kind.to_string(),
            ArtifactEntry {
                path: path.to_path_buf(),
                crc32: file_crc(path)?,
                created_at: chrono::Utc::now().to_rfc3339(),
                config_hash,
            },
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn resolve(&self, kind: &str) -> Option<PathBuf> {
        self.entries.get(kind).map(|e| e.path.clone())
    }
}

/// Short hash of a config snapshot for the manifest.
pub fn config_hash(value: &serde_json::Value) -> String {
    format!("{:08x}", crc32fast::hash(value.to_string().as_bytes()))
}
