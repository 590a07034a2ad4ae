//! Service configuration file.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! data_dir = "data"
//! model = "model/encoder.flrg"
//! index_dir = "index"
//! k_steps = 15
//! k_tables = 10
//!
//! [generator]
//! kind = "remote"
//! endpoint = "http://127.0.0.1:9000"
//! timeout_ms = 30000
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowrag::generator::GeneratorBinding;
use flowrag::pipeline::{DEFAULT_K_STEPS, DEFAULT_K_TABLES};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "FLOWRAG_CONFIG";

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_k_steps() -> usize {
    DEFAULT_K_STEPS
}

fn default_k_tables() -> usize {
    DEFAULT_K_TABLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub index_dir: PathBuf,
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_k_tables")]
    pub k_tables: usize,
    #[serde(default)]
    pub generator: GeneratorBinding,
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).context("invalid service config")?;
        for path in [&mut config.data_dir, &mut config.model, &mut config.index_dir] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        config.generator.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// `explicit` if given, otherwise the path in `FLOWRAG_CONFIG`.
    pub fn resolve_path(explicit: Option<&Path>) -> Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV)
                .map(PathBuf::from)
                .with_context(|| format!("no --config given and {CONFIG_ENV} is not set")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowrag::generator::GeneratorKind;

    #[test]
    fn defaults_and_relative_paths() {
        let c = ServiceConfig::from_toml("data_dir = \"d\"\nmodel = \"/abs/m.flrg\"\nindex_dir = \"i\"\n", Path::new("/etc/flow")).unwrap();
        assert_eq!(c.bind, "127.0.0.1:8080");
        assert_eq!(c.data_dir, Path::new("/etc/flow/d"));
        assert_eq!(c.model, Path::new("/abs/m.flrg"));
        assert_eq!((c.k_steps, c.k_tables), (15, 10));
        assert_eq!(c.generator.kind, GeneratorKind::Oracle);
    }

    #[test]
    fn remote_generator_section() {
        let text = "data_dir = \"d\"\nmodel = \"m\"\nindex_dir = \"i\"\n[generator]\nkind = \"remote\"\nendpoint = \"http://x\"\ntimeout_ms = 50\n";
        let c = ServiceConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(c.generator.kind, GeneratorKind::Remote);
        assert_eq!(c.generator.timeout_ms, 50);
    }

    #[test]
    fn remote_without_endpoint_is_rejected() {
        let text = "data_dir = \"d\"\nmodel = \"m\"\nindex_dir = \"i\"\n[generator]\nkind = \"remote\"\n";
        assert!(ServiceConfig::from_toml(text, Path::new(".")).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServiceConfig::from_toml("data_dir = \"d\"\nmodel = \"m\"\nindex_dir = \"i\"\nport = 1\n", Path::new(".")).is_err());
    }
}
