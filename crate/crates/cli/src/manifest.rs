use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use pathprune::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Hash of the parsed config, so formatting and key order in the file do not matter.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub tool_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, bool>,
    pub artifacts: Vec<ArtifactRecord>,
    pub inputs: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: Option<String>) -> Self {
        RunManifest {
            command: command.into(),
            config_hash,
            tool_version: TOOL_VERSION.into(),
            seeds: BTreeMap::new(),
            stages: BTreeMap::new(),
            artifacts: Vec::new(),
            inputs: Vec::new(),
        }
    }

    /// Records (or replaces) an artifact that lives next to the manifest.
    pub fn add_artifact(&mut self, name: &str, file: &Path) -> Result<(), CliError> {
        let rec = ArtifactRecord { name: name.into(), path: file_name(file), sha256: file_hash(file)? };
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(rec);
        self.artifacts.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(())
    }

    pub fn add_input(&mut self, name: &str, file: &Path) -> Result<(), CliError> {
        self.inputs.push(ArtifactRecord { name: name.into(), path: file.display().to_string(), sha256: file_hash(file)? });
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    /// Every listed artifact exists beside `manifest_path` with the recorded hash.
    pub fn verify(&self, manifest_path: &Path) -> Result<(), CliError> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            let h = file_hash(&p)?;
            if h != a.sha256 {
                return Err(CliError::Mismatch(format!("{} changed since it was written (hash {h}, manifest {})", p.display(), a.sha256)));
            }
        }
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `out.ext` → `out.ext.manifest.json`.
pub fn sidecar(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Checks an input artifact against its sidecar (when it has one) and returns
/// the config hash it was produced under.
pub fn check_input(file: &Path) -> Result<Option<String>, CliError> {
    if !file.exists() {
        return Err(CliError::Missing(file.display().to_string()));
    }
    let side = sidecar(file);
    if !side.exists() {
        log::warn!("{} has no manifest; its provenance is not checked", file.display());
        return Ok(None);
    }
    let m = RunManifest::read(&side)?;
    m.verify(&side)?;
    let name = file_name(file);
    if !m.artifacts.iter().any(|a| a.path == name) {
        return Err(CliError::Mismatch(format!("{} is not listed in {}", file.display(), side.display())));
    }
    Ok(m.config_hash)
}

/// All inputs (and the current config, if any) must share one config hash.
pub fn check_inputs(files: &[&Path], current: Option<&str>) -> Result<(), CliError> {
    let mut seen: Option<(String, String)> = current.map(|h| (h.to_string(), "--config".to_string()));
    for f in files {
        if let Some(h) = check_input(f)? {
            match &seen {
                Some((h0, src)) if *h0 != h => {
                    return Err(CliError::Mismatch(format!(
                        "{} was produced under config {h}, but {src} has config {h0}",
                        f.display()
                    )))
                }
                Some(_) => {}
                None => seen = Some((h, f.display().to_string())),
            }
        }
    }
    Ok(())
}

/// Exclusive writer lock, released on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(path: PathBuf) -> Result<Self, CliError> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path.display().to_string())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    /// Lock for a single output file.
    pub fn for_file(out: &Path) -> Result<Self, CliError> {
        let mut s = out.as_os_str().to_owned();
        s.push(".lock");
        Self::acquire(PathBuf::from(s))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
