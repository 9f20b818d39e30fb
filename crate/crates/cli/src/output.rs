//! Hashed inputs, atomic outputs and run manifests.
//!
//! Each output is written to `<path>.partial` and renamed into place; the
//! manifest `<primary output>.manifest.json` is written last. An output that
//! exists without a matching manifest, or a leftover `.partial` file, marks an
//! interrupted run and is refused unless `--force` is given.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "hmd-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
const PARTIAL_SUFFIX: &str = ".partial";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if value.get("format").and_then(|v| v.as_str()) != Some(MANIFEST_FORMAT) {
            return Err(CliError::Data(format!("{} is not a manifest", path.display())));
        }
        if version != Some(u64::from(MANIFEST_VERSION)) {
            return Err(CliError::Data(format!(
                "{}: manifest version {:?}, expected {MANIFEST_VERSION}",
                path.display(),
                version
            )));
        }
        serde_json::from_value(value).map_err(|e| CliError::data(path.display(), e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hmd_core::eval::hex(&Sha256::digest(bytes))
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    suffixed(primary, MANIFEST_SUFFIX)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `bytes` to `path` through a sibling `.partial` file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = suffixed(path, PARTIAL_SUFFIX);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// One command run: records hashed inputs and buffered outputs, then commits
/// them together with the manifest.
pub struct Job {
    command: String,
    inputs: Vec<FileHash>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
    declared: Vec<PathBuf>,
}

impl Job {
    /// Checks the declared outputs for traces of an interrupted run.
    pub fn start(command: &str, outputs: &[PathBuf], force: bool) -> Result<Self, CliError> {
        let Some(primary) = outputs.first() else {
            return Err(CliError::Usage("no output declared".into()));
        };
        let manifest = manifest_path(primary);
        let mut leftovers = Vec::new();
        for out in outputs.iter().chain(std::iter::once(&manifest)) {
            let tmp = suffixed(out, PARTIAL_SUFFIX);
            if tmp.exists() {
                leftovers.push(tmp);
            }
        }
        let existing: Vec<&PathBuf> = outputs.iter().filter(|p| p.exists()).collect();
        if !existing.is_empty() {
            match manifest.exists().then(|| Manifest::read(&manifest)).transpose() {
                Ok(Some(m)) => {
                    for out in &existing {
                        let key = out.display().to_string();
                        let actual = sha256_hex(&fs::read(out).map_err(|e| CliError::data(out.display(), e))?);
                        if !m.outputs.iter().any(|h| h.path == key && h.sha256 == actual) {
                            leftovers.push((*out).clone());
                        }
                    }
                }
                Ok(None) => leftovers.extend(existing.iter().map(|p| (*p).clone())),
                Err(e) if force => log::warn!("ignoring unreadable manifest: {e}"),
                Err(e) => return Err(e),
            }
        }
        if !leftovers.is_empty() {
            let list: Vec<String> = leftovers.iter().map(|p| p.display().to_string()).collect();
            if !force {
                return Err(CliError::Data(format!(
                    "partial or unrecorded output from an earlier run: {}; rerun with --force to overwrite",
                    list.join(", ")
                )));
            }
            log::warn!("overwriting {}", list.join(", "));
            for p in leftovers
                .iter()
                .filter(|p| p.extension().is_some_and(|e| e == "partial"))
            {
                let _ = fs::remove_file(p);
            }
        }
        Ok(Job {
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            declared: outputs.to_vec(),
        })
    }

    /// Reads an input file and records its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.exists() {
            return Err(CliError::Data(format!("missing input {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| CliError::data(path.display(), e))?;
        self.record_input(path, &bytes);
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?).map_err(|e| CliError::data(path.display(), e))
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn write(&mut self, path: &Path, bytes: Vec<u8>) {
        debug_assert!(
            self.declared.iter().any(|d| d == path),
            "undeclared output {}",
            path.display()
        );
        self.outputs.push((path.to_path_buf(), bytes));
    }

    /// Writes every output, then the manifest.
    pub fn commit(self, settings: &Settings) -> Result<Manifest, CliError> {
        let primary = self.declared[0].clone();
        let mut hashes = Vec::with_capacity(self.outputs.len());
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes).map_err(|e| CliError::data(path.display(), e))?;
            hashes.push(FileHash {
                path: path.display().to_string(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: settings.resolved().get("seed").and_then(|s| s.parse().ok()),
            config: settings.resolved().clone(),
            inputs: self.inputs,
            outputs: hashes,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = manifest_path(&primary);
        write_atomic(&path, text.as_bytes()).map_err(|e| CliError::data(path.display(), e))?;
        Ok(manifest)
    }
}
