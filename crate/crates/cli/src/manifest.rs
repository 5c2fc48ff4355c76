//! Run manifests written beside every output file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mx_core::PrecisionConfig;
use serde::Serialize;

/// What produced an output file, with enough detail to rerun it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<PrecisionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    /// `<dir>/<stem>.manifest.json` for an output at `<dir>/<stem>.<ext>`.
    pub fn path_for(output: &Path) -> PathBuf {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        output.with_file_name(format!("{stem}.manifest.json"))
    }

    /// Writes the manifest for `output`.
    pub fn write_for(&self, output: &Path) -> anyhow::Result<PathBuf> {
        let mut m = self.clone();
        m.output = output.to_path_buf();
        let path = Self::path_for(output);
        let json = serde_json::to_string_pretty(&m)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
