use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::MetricRecord;

pub const MANIFEST_FORMAT: &str = "promim-run";
pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to re-run a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub run_id: String,
    pub command: String,
    /// Command-specific arguments that are not part of the config.
    pub args: serde_json::Value,
    /// Fully resolved configuration, defaults applied.
    pub config: serde_json::Value,
    pub optimizer: String,
    pub encoder_checksum: String,
    pub datasets: Vec<DatasetManifest>,
    pub records: Vec<MetricRecord>,
    pub wall_clock_secs: f64,
    pub tokens_processed: u64,
    pub patch_tokens: u64,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    /// Protocol-specific report, e.g. per-target accuracies.
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        command: &str,
        args: serde_json::Value,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            run_id: run_id.to_string(),
            command: command.to_string(),
            args,
            config,
            optimizer: "sgd: no momentum, no weight decay, constant learning rate".to_string(),
            encoder_checksum: String::new(),
            datasets: Vec::new(),
            records: Vec::new(),
            wall_clock_secs: 0.0,
            tokens_processed: 0,
            patch_tokens: 0,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let m: Self = serde_json::from_slice(&bytes)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{} is not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} manifest",
                path.display()
            )));
        }
        Ok(m)
    }
}
