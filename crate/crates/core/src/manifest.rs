//! `manifest.json`: what produced an output directory and with which inputs.
//! Written when a command starts and rewritten when it finishes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{flat_map, RunConfig};
use crate::error::{Error, Result};
use crate::runlog::MANIFEST_FILE;
use crate::synthworld::{hex_digest, write_atomic};

pub const MANIFEST_FORMAT: &str = "negmine-run";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub status: RunStatus,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub seed: u64,
    pub policy: String,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    /// Hash of the configuration without `seed` and `policy`; runs that share
    /// it differ only in those two and can be compared.
    pub comparison_key: String,
    pub world_path: Option<String>,
    pub world_hash: String,
    pub outputs: Vec<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn comparison_key(cfg: &RunConfig) -> String {
    let text: String = flat_map(cfg)
        .into_iter()
        .filter(|(k, _)| k != "seed" && k != "policy")
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    hex_digest(text.as_bytes())[..16].to_string()
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>, cfg: &RunConfig, world_path: Option<&Path>, world_hash: &str) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            status: RunStatus::Running,
            started_unix: now(),
            finished_unix: None,
            seed: cfg.seed,
            policy: cfg.policy.to_string(),
            config: flat_map(cfg),
            config_hash: cfg.hash(),
            comparison_key: comparison_key(cfg),
            world_path: world_path.map(|p| p.display().to_string()),
            world_hash: world_hash.into(),
            outputs: Vec::new(),
            error: None,
        }
    }

    pub fn add_output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
    }

    pub fn finish(&mut self, outcome: std::result::Result<(), String>) {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = RunStatus::Complete,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e);
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest {} v{}", m.format, m.version),
            ));
        }
        Ok(m)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_and_recover_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.scheduler.lr = 2.5e-4;
        let mut m = RunManifest::start("train", vec!["train".into()], &cfg, None, "abc");
        m.add_output("metrics.csv");
        m.add_output("metrics.csv");
        m.finish(Ok(()));
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.outputs, vec!["metrics.csv"]);
        assert_eq!(back.run_config().unwrap(), cfg);
    }

    #[test]
    fn comparison_key_ignores_seed_and_policy_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        b.policy = crate::batcher::SamplingPolicySpec::Uniform;
        assert_eq!(comparison_key(&a), comparison_key(&b));
        b.batch_size = 16;
        assert_ne!(comparison_key(&a), comparison_key(&b));
    }
}
