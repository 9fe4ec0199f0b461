//! `manifest.json`: every file a command wrote into the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    /// Command that wrote the file.
    pub command: String,
    pub role: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Keyed by path relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, Entry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("missing manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        if dir.join(FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Records `name` (relative to `dir`) after hashing its current contents.
    pub fn record(&mut self, dir: &Path, name: &str, command: &str, role: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name)).with_context(|| format!("reading back {name}"))?;
        self.files.insert(
            name.to_string(),
            Entry {
                command: command.into(),
                role: role.into(),
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            },
        );
        Ok(())
    }

    /// File with the given role, checked to exist on disk.
    pub fn find(&self, dir: &Path, role: &str) -> Result<Option<PathBuf>> {
        match self.files.iter().find(|(_, e)| e.role == role) {
            Some((name, _)) => {
                let p = dir.join(name);
                if !p.exists() {
                    bail!("manifest lists {} but the file is missing", p.display());
                }
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }

    /// Every listed file must exist.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for name in self.files.keys() {
            let p = dir.join(name);
            if !p.exists() {
                bail!("manifest lists {} but the file is missing", p.display());
            }
        }
        Ok(())
    }
}
