//! JSON run manifests: every resolved setting, seed, checksum and artifact
//! path of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub path: String,
    pub checksum: String,
    pub images: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub blank_start: usize,
    pub blank_end: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub model: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub dropout: f64,
    pub optimizer: String,
    pub seed: u64,
    pub hidden_gate: String,
    pub layers: usize,
    pub hidden: usize,
    pub checkpoint_interval: u64,
    pub clip_norm: Option<f64>,
    pub train_images: usize,
    pub log_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub data: DataRecord,
    pub corruption: CorruptionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainRecord>,
    /// Seed of the corruption preview stream (corrupt command only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_seed: Option<u64>,
    /// Artifact paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, data: DataRecord, corruption: CorruptionRecord) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            data,
            corruption,
            train: None,
            preview_seed: None,
            artifacts: Vec::new(),
            resumed_from: None,
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
