//! Output directory bookkeeping: every artifact is written through
//! [`ArtifactSet`], which records its SHA-256 in `manifest.json` together
//! with the input hashes and the seeds each stage used.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, StageContext};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArtifactManifest {
    /// SHA-256 of the effective configuration, output directory excluded.
    pub config_sha256: String,
    pub seed: u64,
    /// Input label to SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    /// Derived seed per stage.
    pub seeds: BTreeMap<String, u64>,
    /// Relative path to entry.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct ArtifactSet {
    dir: PathBuf,
    manifest: ArtifactManifest,
}

impl ArtifactSet {
    /// Opens `dir`, creating it, and continues any manifest already there.
    pub fn open(dir: &Path, config_sha256: String, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Validation(format!("cannot create output directory {}: {e}", dir.display())))?;
        let mut manifest = fs::read_to_string(dir.join(MANIFEST))
            .ok()
            .and_then(|t| serde_json::from_str::<ArtifactManifest>(&t).ok())
            .filter(|m| m.config_sha256 == config_sha256 && m.seed == seed)
            .unwrap_or_default();
        manifest.config_sha256 = config_sha256;
        manifest.seed = seed;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.insert(label.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn record_seed(&mut self, stage: &str, seed: u64) {
        self.manifest.seeds.insert(stage.to_string(), seed);
    }

    pub fn write_bytes(&mut self, stage: &'static str, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).stage(stage)?;
        }
        fs::write(&path, bytes).stage(stage)?;
        self.manifest.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                stage: stage.to_string(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, stage: &'static str, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).stage(stage)?;
        bytes.push(b'\n');
        self.write_bytes(stage, name, &bytes)
    }

    pub fn write_text(&mut self, stage: &'static str, name: &str, text: &str) -> Result<(), CliError> {
        self.write_bytes(stage, name, text.as_bytes())
    }

    pub fn write_csv(
        &mut self,
        stage: &'static str,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).stage(stage)?;
        for r in rows {
            w.write_record(r).stage(stage)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Stage {
            stage,
            source: twinshield::Error::Io(e.into_error()),
        })?;
        self.write_bytes(stage, name, &bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, stage: &'static str, name: &str) -> Result<T, CliError> {
        let text = fs::read_to_string(self.path(name)).map_err(|_| CliError::MissingArtifact {
            stage,
            artifact: name.to_string(),
        })?;
        serde_json::from_str(&text).stage(stage)
    }

    pub fn manifest(&self) -> &ArtifactManifest {
        &self.manifest
    }

    /// Writes `manifest.json`; call after every stage so partial runs keep
    /// an accurate record.
    pub fn flush(&self) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).stage("manifest")?;
        bytes.push(b'\n');
        fs::write(self.dir.join(MANIFEST), bytes).stage("manifest")
    }
}

/// Shortest round-trip decimal form, as used in every CSV artifact.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}
