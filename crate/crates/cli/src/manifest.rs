//! Run provenance written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vat::experiment::ExperimentConfig;
use vat::fingerprint;
use vat::synthdata::{self, SplitName};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    File,
    /// A generated split, fingerprinted by its manifest.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFingerprint {
    pub name: String,
    pub kind: InputKind,
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFingerprint {
    pub fn file(name: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            kind: InputKind::File,
            path: path.to_path_buf(),
            sha256: fingerprint::of_file(path)?,
        })
    }

    pub fn split(root: &Path, split: SplitName) -> Result<Self> {
        Ok(Self {
            name: split.to_string(),
            kind: InputKind::Split,
            path: root.to_path_buf(),
            sha256: synthdata::split_fingerprint(root, split)?,
        })
    }

    fn recompute(&self) -> Result<String> {
        Ok(match self.kind {
            InputKind::File => fingerprint::of_file(&self.path)?,
            InputKind::Split => {
                let split = SplitName::ALL
                    .into_iter()
                    .find(|s| s.to_string() == self.name)
                    .with_context(|| format!("unknown split {}", self.name))?;
                synthdata::split_fingerprint(&self.path, split)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: ExperimentConfig,
    pub config_fingerprint: String,
    pub seed: u64,
    pub deterministic: bool,
    pub data_root: PathBuf,
    pub inputs: Vec<InputFingerprint>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hashes every recorded input.
    pub fn verify(&self) -> Result<()> {
        for input in &self.inputs {
            let found = input.recompute()?;
            if found != input.sha256 {
                bail!(
                    "fingerprint mismatch for {} ({}): expected {}, found {found}",
                    input.name,
                    input.path.display(),
                    input.sha256
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("w.bin");
        fs::write(&input, b"weights").unwrap();
        let m = RunManifest {
            command: "eval".into(),
            argv: vec!["vat".into(), "eval".into()],
            version: "0.1.0".into(),
            config: ExperimentConfig::default(),
            config_fingerprint: "abc".into(),
            seed: 0,
            deterministic: true,
            data_root: dir.path().to_path_buf(),
            inputs: vec![InputFingerprint::file("weights", &input).unwrap()],
            outputs: vec![],
            wall_clock_seconds: 1.0,
            notes: vec![],
        };
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        back.verify().unwrap();
        fs::write(&input, b"tampered").unwrap();
        assert!(back.verify().is_err());
    }
}
