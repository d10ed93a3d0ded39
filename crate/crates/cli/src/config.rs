//! Settings file (TOML or JSON) mirroring the command-line flags. Precedence:
//! flag, then environment, then file, then built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use agentos_core::planner::HttpBackendConfig;
use agentos_core::runtime::ExecutionMode;

use crate::CliError;

pub const ENV_ENDPOINT: &str = "AGENTOS_PLANNER_ENDPOINT";
pub const ENV_MODEL: &str = "AGENTOS_PLANNER_MODEL";
pub const ENV_KEY: &str = "AGENTOS_PLANNER_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSettings {
    pub kind: Option<PlannerKind>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub catalog: Option<PathBuf>,
    pub mode: Option<ExecutionMode>,
    pub max_steps: Option<usize>,
    pub max_batch: Option<usize>,
    pub auto_approve: Option<bool>,
    pub knowledge: Option<PathBuf>,
    pub port: Option<u16>,
    pub planner: PlannerSettings,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |reason: String| CliError::Config {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    /// Apply the planner environment variables through `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(v) = lookup(ENV_ENDPOINT) {
            self.planner.endpoint = Some(v);
        }
        if let Some(v) = lookup(ENV_MODEL) {
            self.planner.model = Some(v);
        }
        if let Some(v) = lookup(ENV_KEY) {
            self.planner.api_key = Some(v);
        }
        self
    }

    pub fn http_backend(&self) -> Result<HttpBackendConfig, CliError> {
        let p = &self.planner;
        let endpoint = p
            .endpoint
            .clone()
            .ok_or_else(|| CliError::Usage(format!("the http planner needs an endpoint (set {ENV_ENDPOINT} or planner.endpoint)")))?;
        Ok(HttpBackendConfig {
            endpoint,
            model: p.model.clone().unwrap_or_default(),
            api_key: p.api_key.clone(),
            timeout_ms: p.timeout_ms.unwrap_or(60_000),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "catalog = \"cat\"\nmode = \"single\"\nmax_steps = 7\n[planner]\nkind = \"http\"\nendpoint = \"http://x\"\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"catalog": "cat", "mode": "single", "max_steps": 7, "planner": {"kind": "http", "endpoint": "http://x"}}"#).unwrap();
        let a = Settings::load(&t).unwrap();
        assert_eq!(a, Settings::load(&j).unwrap());
        assert_eq!(a.mode, Some(ExecutionMode::Single));
        assert_eq!(a.planner.kind, Some(PlannerKind::Http));
    }

    #[test]
    fn env_overrides_file() {
        let s = Settings {
            planner: PlannerSettings {
                endpoint: Some("http://file".into()),
                ..Default::default()
            },
            ..Default::default()
        }
        .with_env(|k| (k == ENV_ENDPOINT).then(|| "http://env".to_string()));
        assert_eq!(s.planner.endpoint.as_deref(), Some("http://env"));
        assert_eq!(s.http_backend().unwrap().timeout_ms, 60_000);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "catalogue = \"x\"\n").unwrap();
        assert!(Settings::load(&t).is_err());
    }
}
