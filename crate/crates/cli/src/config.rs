//! Layered run configuration: preset, then config file, then flags.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Name of the snapshot written beside every run's outputs.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

/// Invalid or unreadable configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserialises `base` overlaid with the optional TOML file. Unknown fields
/// are rejected by the target type and reported with their name.
pub fn resolve<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let mut value = toml::Value::try_from(base).context("serialising preset")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: toml::Value =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        merge(&mut value, overlay);
    }
    let where_ = file.map(|p| p.display().to_string()).unwrap_or_else(|| "preset".into());
    value.try_into().map_err(|e: toml::de::Error| config_error(format!("{where_}: {}", e.message().trim())))
}

/// Writes the resolved config as TOML; the file can be passed back with
/// `--config` to repeat the run.
pub fn write_snapshot<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = toml::to_string_pretty(cfg).context("serialising resolved config")?;
    let text = format!("# resolved configuration for `pase {command}`\n{body}");
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        a: u32,
        b: Option<f64>,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        name: String,
        inner: Inner,
    }

    fn base() -> Outer {
        Outer { name: "x".into(), inner: Inner { a: 1, b: Some(2.0) } }
    }

    #[test]
    fn file_overrides_nested_fields_only() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[inner]\na = 7\n").unwrap();
        let r: Outer = resolve(&base(), Some(&f)).unwrap();
        assert_eq!(r, Outer { name: "x".into(), inner: Inner { a: 7, b: Some(2.0) } });
    }

    #[test]
    fn unknown_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[inner]\nbogus_knob = 1\n").unwrap();
        let err = resolve(&base(), Some(&f)).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_snapshot(dir.path(), "test", &base()).unwrap();
        let r: Outer = resolve(&base(), Some(&dir.path().join(SNAPSHOT_FILE))).unwrap();
        assert_eq!(r, base());
    }
}
