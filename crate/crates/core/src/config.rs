//! Run configuration: TOML file, environment overrides for endpoint URLs,
//! and flag overrides, with precedence flags > env > file > defaults.

use crate::curate::CuratorConfig;
use crate::degrade::DegradationRanges;
use crate::error::{Error, Result};
use crate::selector::SelectorConfig;
use crate::services::{ServiceSet, ToolEndpoints};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Curation-loop settings as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationSection {
    pub max_steps: usize,
    pub tau_dup: f64,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self {
            max_steps: 5,
            tau_dup: 0.95,
        }
    }
}

/// Full run configuration. `endpoints` absent means mock mode, where a seed
/// is mandatory for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub worker_count: Option<usize>,
    /// Longest image side after loading; larger inputs are downscaled.
    pub max_side: Option<usize>,
    pub endpoints: Option<ToolEndpoints>,
    pub selector: SelectorConfig,
    pub curation: CurationSection,
    pub degradation: DegradationRanges,
}

/// Flag-level overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub worker_count: Option<usize>,
    pub max_side: Option<usize>,
    pub tau_local: Option<f64>,
    pub tau_global: Option<f64>,
    pub tau_dup: Option<f64>,
    pub max_steps: Option<usize>,
    pub mock: bool,
}

impl RunConfig {
    /// Loads a TOML config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `LAYERLAB_*_URL` environment overrides to the endpoint set.
    pub fn apply_env(&mut self) {
        let getenv = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let any = [
            "LAYERLAB_AGENT_URL",
            "LAYERLAB_EDITOR_URL",
            "LAYERLAB_SEGMENTER_URLS",
            "LAYERLAB_EMBEDDER_URL",
            "LAYERLAB_VERIFIER_URL",
        ]
        .iter()
        .any(|n| getenv(n).is_some());
        if !any {
            return;
        }
        let endpoints = self.endpoints.get_or_insert_with(|| ToolEndpoints {
            agent_url: String::new(),
            editor_url: String::new(),
            segmenter_urls: Vec::new(),
            embedder_url: String::new(),
            verifier_url: String::new(),
            timeout_secs: 30,
            retries: 3,
        });
        if let Some(v) = getenv("LAYERLAB_AGENT_URL") {
            endpoints.agent_url = v;
        }
        if let Some(v) = getenv("LAYERLAB_EDITOR_URL") {
            endpoints.editor_url = v;
        }
        if let Some(v) = getenv("LAYERLAB_SEGMENTER_URLS") {
            endpoints.segmenter_urls = v.split(',').map(|s| s.trim().to_string()).collect();
        }
        if let Some(v) = getenv("LAYERLAB_EMBEDDER_URL") {
            endpoints.embedder_url = v;
        }
        if let Some(v) = getenv("LAYERLAB_VERIFIER_URL") {
            endpoints.verifier_url = v;
        }
    }

    /// Applies flag overrides (highest precedence).
    pub fn apply_overrides(&mut self, overrides: &ConfigOverrides) {
        if overrides.mock {
            self.endpoints = None;
        }
        if let Some(v) = overrides.seed {
            self.seed = Some(v);
        }
        if let Some(v) = overrides.worker_count {
            self.worker_count = Some(v);
        }
        if let Some(v) = overrides.max_side {
            self.max_side = Some(v);
        }
        if let Some(v) = overrides.tau_local {
            self.selector.tau_local = v;
        }
        if let Some(v) = overrides.tau_global {
            self.selector.tau_global = v;
        }
        if let Some(v) = overrides.tau_dup {
            self.curation.tau_dup = v;
        }
        if let Some(v) = overrides.max_steps {
            self.curation.max_steps = v;
        }
    }

    /// Validates cross-field rules and returns the effective values.
    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        if self.endpoints.is_none() && self.seed.is_none() {
            return Err(Error::Config(
                "mock mode requires an explicit seed (set `seed` or pass --seed)".into(),
            ));
        }
        if let Some(endpoints) = &self.endpoints {
            endpoints.validate()?;
        }
        if self.worker_count == Some(0) {
            return Err(Error::Config("worker_count must be >= 1".into()));
        }
        if self.max_side == Some(0) {
            return Err(Error::Config("max_side must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn effective_workers(&self) -> usize {
        self.worker_count.unwrap_or(1).max(1)
    }

    pub fn effective_max_side(&self) -> usize {
        self.max_side.unwrap_or(1024).max(1)
    }

    /// The curator-facing slice of this config.
    pub fn curator_config(&self) -> CuratorConfig {
        CuratorConfig {
            max_steps: self.curation.max_steps,
            selector: self.selector,
            tau_dup: self.curation.tau_dup,
            seed: self.effective_seed(),
        }
    }

    /// Builds the service set this config asks for.
    pub fn services(&self) -> Result<ServiceSet> {
        match &self.endpoints {
            None => Ok(ServiceSet::mock(self.effective_seed())),
            Some(endpoints) => ServiceSet::http(endpoints, self.effective_seed()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_mock_mode_without_seed() {
        let config = RunConfig::default();
        assert!(config.endpoints.is_none());
        assert!(config.validate().is_err());
        let mut with_seed = config;
        with_seed.seed = Some(1);
        with_seed.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
seed = 7
worker_count = 2

[selector]
tau_local = 0.9
tau_global = 0.8
max_foregrounds = 4

[curation]
max_steps = 3
tau_dup = 0.97
"#,
        )
        .unwrap();
        let mut config = RunConfig::from_file(&path).unwrap();
        assert_eq!(config.seed, Some(7));
        assert_eq!(config.selector.max_foregrounds, 4);
        assert_eq!(config.curation.max_steps, 3);

        config.apply_overrides(&ConfigOverrides {
            seed: Some(99),
            tau_local: Some(0.95),
            ..ConfigOverrides::default()
        });
        assert_eq!(config.seed, Some(99));
        assert!((config.selector.tau_local - 0.95).abs() < 1e-12);
        assert_eq!(config.curation.max_steps, 3);
        config.validate().unwrap();
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = \"not a number\"").unwrap();
        assert!(matches!(
            RunConfig::from_file(&path),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn endpoint_validation_runs_when_present() {
        let mut config = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        config.endpoints = Some(ToolEndpoints {
            agent_url: "http://localhost:1".into(),
            editor_url: "http://localhost:1".into(),
            segmenter_urls: vec![],
            embedder_url: "http://localhost:1".into(),
            verifier_url: "http://localhost:1".into(),
            timeout_secs: 5,
            retries: 1,
        });
        assert!(config.validate().is_err());
    }
}
