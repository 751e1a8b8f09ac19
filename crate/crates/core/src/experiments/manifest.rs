use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::record::METRICS_SCHEMA;

/// What an output directory needs for a bit-comparable re-run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    pub metrics_schema: u32,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

/// `git describe --always --dirty`, or `unknown` outside a checkout.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_describe: git_describe(),
            metrics_schema: METRICS_SCHEMA,
            seeds: cfg.seeds.clone(),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
