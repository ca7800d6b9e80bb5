//! Atomic file output, input fingerprints and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::config::RunConfig;

/// A file written under a temporary name in its destination directory and
/// renamed into place on commit. Dropping it uncommitted removes it.
pub struct StagedFile {
    writer: BufWriter<NamedTempFile>,
    dest: PathBuf,
}

impl StagedFile {
    pub fn create(dest: &Path) -> Result<Self> {
        let dir = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let tmp = NamedTempFile::new_in(dir).with_context(|| format!("staging {}", dest.display()))?;
        Ok(Self {
            writer: BufWriter::new(tmp),
            dest: dest.to_path_buf(),
        })
    }

    pub fn commit(self) -> Result<PathBuf> {
        let dest = self.dest.clone();
        self.commit_as(&dest)
    }

    pub fn commit_as(self, dest: &Path) -> Result<PathBuf> {
        let tmp = self
            .writer
            .into_inner()
            .map_err(|e| e.into_error())
            .with_context(|| format!("flushing {}", dest.display()))?;
        tmp.persist(dest)
            .with_context(|| format!("renaming into {}", dest.display()))?;
        Ok(dest.to_path_buf())
    }
}

impl Write for StagedFile {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let mut f = StagedFile::create(dest)?;
    f.write_all(bytes)?;
    f.commit()
}

pub fn write_json_atomic<T: Serialize>(dest: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(dest, text.as_bytes())
}

pub fn write_jsonl_atomic<T: Serialize>(dest: &Path, items: &[T]) -> Result<PathBuf> {
    let mut f = StagedFile::create(dest)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.commit()
}

/// SHA-256 of a file, or of a directory's files taken in name order.
pub fn fingerprint_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
            hasher.update([0]);
        }
    } else {
        hasher.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct InputFingerprint {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command and compare its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub template_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, InputFingerprint>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, template_version: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            template_version: template_version.to_string(),
            backend: None,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = fingerprint_path(path)?;
        self.inputs.insert(
            role.to_string(),
            InputFingerprint {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    /// Writes the manifest and the resolved config into `dir`.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        let config_path = dir.join("config.toml");
        write_atomic(&config_path, toml::to_string(&self.config)?.as_bytes())?;
        self.outputs.push(config_path);
        write_json_atomic(&dir.join("run.json"), &self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_files_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out.jsonl");
        {
            let mut f = StagedFile::create(&dest).unwrap();
            f.write_all(b"partial").unwrap();
        }
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomic(&dest, b"done").unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"done");
    }

    #[test]
    fn directory_fingerprint_depends_on_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), "1").unwrap();
        let one = fingerprint_path(dir.path()).unwrap();
        fs::write(dir.path().join("b"), "").unwrap();
        assert_ne!(one, fingerprint_path(dir.path()).unwrap());
    }
}
