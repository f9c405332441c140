//! Atomic file output and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "TICKETLAB_OUTPUT";

/// Version tag of the CSV schemas written by this crate.
pub const CSV_SCHEMA_VERSION: &str = "v1";

/// Writes via a temporary file in the target directory and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory, '/'-separated.
    pub path: String,
    /// Arm (or other group) the file belongs to.
    pub arm: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub init: u64,
    pub sgd: u64,
    pub transfer: u64,
    pub split: u64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub artifact_version: String,
    pub csv_schema: String,
    pub wall_clock_secs: f64,
    pub seeds: SeedRecord,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// Re-reads every listed file and compares its checksum.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for f in &self.files {
            let path = root.join(&f.path);
            let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(HarnessError::format(path, "checksum does not match the manifest"));
            }
        }
        Ok(())
    }
}

/// Output directory that remembers every file written through it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, arm: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            arm: arm.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(self, config_text: &str, seeds: SeedRecord, wall_clock_secs: f64) -> Result<RunManifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            config_sha256: sha256_hex(config_text.as_bytes()),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema: CSV_SCHEMA_VERSION.to_string(),
            wall_clock_secs,
            seeds,
            files,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.root.join("manifest.json"), &json)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_tracks_and_verifies_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path().join("run")).unwrap();
        out.write("a.csv", "x", b"hello\n").unwrap();
        out.write("sub/b.bin", "y", &[1, 2, 3]).unwrap();
        out.write("a.csv", "x", b"again\n").unwrap();
        let root = out.root().to_path_buf();
        let seeds = SeedRecord {
            init: 0,
            sgd: 0,
            transfer: 0,
            split: 0,
            trials: 1,
        };
        let m = out.finish("cfg", seeds, 0.0).unwrap();
        assert_eq!(m.files.len(), 2);
        m.verify(&root).unwrap();
        std::fs::write(root.join("a.csv"), b"tampered").unwrap();
        assert!(m.verify(&root).is_err());
        assert!(root.join("manifest.json").exists());
    }
}
