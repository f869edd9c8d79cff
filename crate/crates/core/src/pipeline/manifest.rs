//! Run manifests: what a stage read, what it wrote, and with which seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SkyError};
use crate::io::{write_json, BUNDLE_FILES};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| SkyError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

/// Hash of a dataset bundle: the five CSVs in fixed order, each prefixed by
/// its file name.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in BUNDLE_FILES {
        let path = dir.join(f);
        let data = fs::read(&path).map_err(|e| SkyError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        h.update(f.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        h.update(&data);
    }
    Ok(hex::encode(h.finalize()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn start(command: impl Into<String>, config_hash: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("skyquil".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("manifest_format".to_string(), "1".to_string());
        RunManifest {
            command: command.into(),
            config_hash,
            dataset_hash: None,
            seeds: Vec::new(),
            versions,
            started_unix: unix_now(),
            finished_unix: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn outputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.output(p)?;
        }
        Ok(())
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix = unix_now();
        write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }

    /// Output digests keyed by file name, for comparing re-runs.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.outputs
            .iter()
            .map(|d| {
                let name = Path::new(&d.path)
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| d.path.clone());
                (name, d.sha256.clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, b"abc").unwrap();
        let d = FileDigest::of(&p).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(d.bytes, 3);
    }

    #[test]
    fn manifest_is_written_once_per_directory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        fs::write(&p, b"x\n1\n").unwrap();
        let mut m = RunManifest::start("test", "h".into());
        m.output(&p).unwrap();
        let m = m.finish(dir.path()).unwrap();
        let back: RunManifest = crate::io::read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.output_hashes().len(), 1);
        assert!(m.finished_unix >= m.started_unix);
    }
}
