//! Output directory layout and the artifact manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use vemu::adaptation::Provenance;
use vemu::BiLstmModel;

use crate::error::CliError;

/// Model lookup order when several checkpoints exist for one bias.
pub const RESOLUTION_ORDER: [Provenance; 4] = [
    Provenance::Scratch,
    Provenance::Transfer,
    Provenance::Reservoir,
    Provenance::Interpolated,
];

pub struct Layout {
    pub root: PathBuf,
}

pub fn millivolts(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, v: f64) -> PathBuf {
        self.root.join("datasets").join(format!("regime_{:04}mV.vemu", millivolts(v)))
    }

    pub fn model(&self, prov: Provenance, v: f64) -> PathBuf {
        self.root.join("models").join(format!("{}_{:04}mV.vemw", prov.name(), millivolts(v)))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    /// First existing checkpoint for `v` in [`RESOLUTION_ORDER`].
    pub fn resolve_model(&self, v: f64) -> Result<(BiLstmModel, Provenance, PathBuf), CliError> {
        for prov in RESOLUTION_ORDER {
            let path = self.model(prov, v);
            if path.exists() {
                let model = BiLstmModel::load(&path).map_err(|e| CliError::from(e).at(&path))?;
                return Ok((model, prov, path));
            }
        }
        Err(CliError::Data(format!(
            "no model for {v} V under {}; run `vemu train --regime {v}` first",
            self.root.join("models").display()
        )))
    }

    pub fn load_dataset(&self, v: f64) -> Result<vemu::dataset::SymbolDataset, CliError> {
        let path = self.dataset(v);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "missing dataset {}; run `vemu simulate --regime {v}` first",
                path.display()
            )));
        }
        vemu::dataset::load_dataset(&path).map_err(|e| CliError::from(e).at(&path))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance context stamped on every artifact written by one invocation.
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
}

/// Writes `bytes` to `path` and records it in the manifest, replacing any
/// earlier entry for the same path.
pub fn write_artifact(layout: &Layout, stamp: &Stamp, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::from(e).at(dir))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::from(e).at(path))?;
    let rel = path.strip_prefix(&layout.root).unwrap_or(path).display().to_string();
    let manifest = layout.manifest();
    let old = match fs::read_to_string(&manifest) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CliError::from(e).at(&manifest)),
    };
    let mut lines: Vec<String> = old
        .lines()
        .filter(|l| !l.is_empty() && l.split('\t').next() != Some(rel.as_str()))
        .map(str::to_string)
        .collect();
    lines.push(format!(
        "{rel}\t{}\t{}\t{}\t{}",
        sha256_hex(bytes),
        stamp.config_hash,
        stamp.seed,
        stamp.command
    ));
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&manifest, text).map_err(|e| CliError::from(e).at(&manifest))
}
