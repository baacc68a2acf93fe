//! Run manifests: what was run, with which seeds, and a SHA-256 inventory
//! of every emitted file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::FailedCell;
use crate::error::{HarnessError, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Seed provenance of one `(N, replica)` cell: the replica stream is
/// `stream(master_seed, Replica, n, replica)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeed {
    pub n: usize,
    pub replica: u64,
    pub stream_id: u64,
}

/// One pass/fail line of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub tolerance: String,
    pub pass: bool,
    /// Files holding the supporting data.
    pub files: Vec<String>,
}

impl Check {
    pub fn new(name: impl Into<String>, value: impl Into<String>, tolerance: impl Into<String>, pass: bool) -> Self {
        Self { name: name.into(), value: value.into(), tolerance: tolerance.into(), pass, files: Vec::new() }
    }

    pub fn with_files(mut self, files: &[&str]) -> Self {
        self.files = files.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub spec_sha256: String,
    pub code_version: String,
    pub master_seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub runs: Vec<RunSeed>,
    pub failed_cells: Vec<FailedCell>,
    pub checks: Vec<Check>,
    pub files: Vec<FileEntry>,
    /// Free-form provenance (grid sizes, box, reference size).
    pub notes: Vec<(String, String)>,
}

impl RunManifest {
    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn code_version() -> String {
    format!("mfclt-harness {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).at(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Digests `names` (relative to `dir`).
pub fn inventory(dir: &Path, names: &[String]) -> Result<Vec<FileEntry>> {
    names
        .iter()
        .map(|name| {
            let (sha256, bytes) = sha256_file(&dir.join(name))?;
            Ok(FileEntry { path: name.clone(), sha256, bytes })
        })
        .collect()
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).at(&path)?;
    Ok(path)
}

/// Reads a manifest from a file or from the directory holding it.
pub fn read_manifest(path: &Path) -> Result<(RunManifest, PathBuf)> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).at(&file)?;
    let manifest = serde_json::from_str(&text)?;
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

/// Re-digests every inventoried file.
pub fn verify(manifest: &RunManifest, dir: &Path) -> Result<()> {
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        if !path.is_file() {
            return Err(HarnessError::Integrity { path, detail: "file listed in the manifest is missing".into() });
        }
        let (sha, bytes) = sha256_file(&path)?;
        if sha != entry.sha256 || bytes != entry.bytes {
            return Err(HarnessError::Integrity {
                path,
                detail: format!("digest mismatch (manifest {}, file {sha})", entry.sha256),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> RunManifest {
        std::fs::write(dir.join("a.csv"), "x,y\n1,2\n").unwrap();
        RunManifest {
            experiment: "lln-rate".into(),
            spec_sha256: "00".into(),
            code_version: code_version(),
            master_seed: 1,
            started_unix: 0,
            finished_unix: 0,
            runs: vec![],
            failed_cells: vec![],
            checks: vec![],
            files: inventory(dir, &["a.csv".to_string()]).unwrap(),
            notes: vec![],
        }
    }

    #[test]
    fn digest_matches_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        let (sha, bytes) = sha256_file(&p).unwrap();
        assert_eq!(sha, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(bytes, 3);
    }

    #[test]
    fn tampering_and_deletion_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        write_manifest(dir.path(), &m).unwrap();
        let (back, base) = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        verify(&back, &base).unwrap();
        std::fs::write(dir.path().join("a.csv"), "x,y\n1,3\n").unwrap();
        assert!(matches!(verify(&back, &base), Err(HarnessError::Integrity { .. })));
        std::fs::remove_file(dir.path().join("a.csv")).unwrap();
        assert!(matches!(verify(&back, &base), Err(HarnessError::Integrity { .. })));
    }
}
