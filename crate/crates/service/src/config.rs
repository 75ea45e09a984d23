//! Service configuration: TOML file plus environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use btforge::backends::BackendConfig;
use serde::{Deserialize, Serialize};

pub const BIND_ENV: &str = "BTFORGE_BIND";
pub const DATA_DIR_ENV: &str = "BTFORGE_DATA_DIR";
pub const FEEDBACK_TIMEOUT_ENV: &str = "BTFORGE_FEEDBACK_TIMEOUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("{var}: {reason}")]
    Env { var: &'static str, reason: String },
    #[error("default profile {0:?} is not defined")]
    MissingDefault(String),
}

/// ```toml
/// bind = "127.0.0.1:8080"
/// data_dir = "btforge-data"
/// feedback_timeout_seconds = 30
/// default_profile = "oracle"
///
/// [profiles.oracle]
/// kind = "oracle"
///
/// [profiles.gpt]
/// kind = "remote"
/// model = "gpt-4"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// How long a pending feedback request waits before it is announced again.
    #[serde(default = "default_timeout")]
    pub feedback_timeout_seconds: f64,
    #[serde(default = "default_profile")]
    pub default_profile: String,
    /// Backend profiles that sessions refer to by name.
    #[serde(default)]
    pub profiles: BTreeMap<String, BackendConfig>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("btforge-data")
}
fn default_timeout() -> f64 {
    30.0
}
fn default_profile() -> String {
    "oracle".into()
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let mut c = ServiceConfig {
            bind: default_bind(),
            data_dir: default_data_dir(),
            feedback_timeout_seconds: default_timeout(),
            default_profile: default_profile(),
            profiles: BTreeMap::new(),
        };
        c.ensure_oracle();
        c
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut c: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.ensure_oracle();
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The oracle profile is always available.
    fn ensure_oracle(&mut self) {
        self.profiles.entry("oracle".into()).or_insert_with(BackendConfig::oracle);
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !self.profiles.contains_key(&self.default_profile) {
            return Err(ConfigError::MissingDefault(self.default_profile.clone()));
        }
        Ok(())
    }

    /// Applies `BTFORGE_BIND`, `BTFORGE_DATA_DIR` and `BTFORGE_FEEDBACK_TIMEOUT`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(BIND_ENV) {
            self.bind = v;
        }
        if let Some(v) = lookup(DATA_DIR_ENV) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup(FEEDBACK_TIMEOUT_ENV) {
            self.feedback_timeout_seconds = v.parse().map_err(|_| ConfigError::Env {
                var: FEEDBACK_TIMEOUT_ENV,
                reason: format!("not a number: {v:?}"),
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_profiles() {
        let c = ServiceConfig::from_toml(
            r#"
            bind = "0.0.0.0:9000"
            default_profile = "replay"
            [profiles.replay]
            kind = "scripted"
            transcript = "t.jsonl"
            "#,
        )
        .unwrap();
        assert_eq!(c.bind, "0.0.0.0:9000");
        assert_eq!(c.feedback_timeout_seconds, 30.0);
        assert!(c.profiles.contains_key("oracle"));
        assert_eq!(c.profiles["replay"], BackendConfig::scripted("t.jsonl"));
    }

    #[test]
    fn rejects_unknown_default() {
        let err = ServiceConfig::from_toml("default_profile = \"gpt\"").unwrap_err();
        assert!(matches!(err, ConfigError::MissingDefault(_)));
        assert!(ServiceConfig::from_toml("port = 1").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::default();
        c.apply_env(|k| match k {
            BIND_ENV => Some("127.0.0.1:1".into()),
            FEEDBACK_TIMEOUT_ENV => Some("0.5".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.bind, "127.0.0.1:1");
        assert_eq!(c.feedback_timeout_seconds, 0.5);
        assert!(c.apply_env(|k| (k == FEEDBACK_TIMEOUT_ENV).then(|| "soon".into())).is_err());
    }
}
