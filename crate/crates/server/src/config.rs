//! Service configuration, read from a JSON file.
//!
//! ```json
//! {
//!   "store_dir": "./mercury-data",
//!   "listen": "127.0.0.1:8080",
//!   "providers_file": "./providers.json",
//!   "log_level": "info",
//!   "cors_origin": "http://localhost:5173"
//! }
//! ```
//!
//! Every field is optional. The file is located by, in order: an explicit
//! path, the `MERCURY_CONFIG` environment variable, then `./mercury.json`
//! if it exists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "MERCURY_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "mercury.json";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_STORE_DIR: &str = "mercury-data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    Warn,
    #[default]
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Error => "error",
            LogLevel::Warn => "warn",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
            LogLevel::Trace => "trace",
        }
    }
}

impl std::str::FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| {
            format!("unknown log level {s:?} (expected error, warn, info, debug or trace)")
        })
    }
}

fn default_store_dir() -> PathBuf {
    PathBuf::from(DEFAULT_STORE_DIR)
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_store_dir")]
    pub store_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Provider list location; defaults to `providers.json` in the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub providers_file: Option<PathBuf>,
    #[serde(default)]
    pub log_level: LogLevel,
    /// Extra origin allowed to call the API cross-origin (development UI).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cors_origin: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store_dir: default_store_dir(),
            listen: default_listen(),
            providers_file: None,
            log_level: LogLevel::default(),
            cors_origin: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigFileError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigFileError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| ConfigFileError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Resolve and load the configuration file. `env` is the value of
    /// `MERCURY_CONFIG`, passed in so callers control the environment.
    pub fn locate(explicit: Option<&Path>, env: Option<&str>) -> Result<Self, ConfigFileError> {
        if let Some(p) = explicit {
            return Self::from_file(p);
        }
        if let Some(p) = env.filter(|p| !p.is_empty()) {
            return Self::from_file(Path::new(p));
        }
        let default = Path::new(DEFAULT_CONFIG_FILE);
        if default.is_file() {
            return Self::from_file(default);
        }
        Ok(Self::default())
    }
}
