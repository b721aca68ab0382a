use std::path::Path;

use crate::runtime::KernelConfig;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7878";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
}

/// Server settings: the listen address and backend placement plus every
/// [`KernelConfig`] key at the top level of the same TOML table.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub listen: String,
    /// Run the backend in a child process speaking the backend frame codec.
    pub split_backend: bool,
    pub kernel: KernelConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: DEFAULT_LISTEN.into(),
            split_backend: false,
            kernel: KernelConfig { virtual_clock: false, ..KernelConfig::default() },
        }
    }
}

impl ServerConfig {
    /// Parses a TOML document. Unknown keys are rejected; a server runs on
    /// the wall clock unless `virtual_clock = true` is given explicitly.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let listen = match table.remove("listen") {
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(ConfigError::Parse(format!("`listen` must be a string, got {v}"))),
            None => DEFAULT_LISTEN.into(),
        };
        let split_backend = match table.remove("split_backend") {
            Some(toml::Value::Boolean(b)) => b,
            Some(v) => return Err(ConfigError::Parse(format!("`split_backend` must be a boolean, got {v}"))),
            None => false,
        };
        table.entry("virtual_clock").or_insert(toml::Value::Boolean(false));
        let known = match toml::Table::try_from(KernelConfig::default()) {
            Ok(t) => t,
            Err(e) => return Err(ConfigError::Parse(e.to_string())),
        };
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(ConfigError::Parse(format!("unknown key `{k}`")));
        }
        let kernel: KernelConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        kernel.validate().map_err(ConfigError::Parse)?;
        Ok(ServerConfig { listen, split_backend, kernel })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
