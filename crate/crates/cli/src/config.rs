use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use fsr_core::types::SCHEMA_VERSION;

pub const SEED_ENV: &str = "FSR_SEED";

/// Layers explicit command-line values over an optional JSON override file,
/// which in turn overrides a seed taken from `FSR_SEED`.
///
/// Unset (`None`) flags fall through; the merged object must then
/// deserialize into the command's resolved config.
pub fn resolve<C: DeserializeOwned>(file: Option<&Path>, cli: &impl Serialize) -> anyhow::Result<C> {
    let mut merged = Map::new();
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed: u64 = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
        merged.insert("seed".into(), seed.into());
    }
    let from_file = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            match serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))? {
                Value::Object(m) => m,
                _ => bail!("config {} must hold a JSON object", p.display()),
            }
        }
        None => Map::new(),
    };
    merged.extend(from_file);
    if let Value::Object(flags) = serde_json::to_value(cli)? {
        for (k, v) in flags {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).context("incomplete or invalid configuration")
}

/// `{schema_version, command, ...config}`.
pub fn describe(command: &str, config: &impl Serialize) -> Value {
    let mut m = Map::new();
    m.insert("schema_version".into(), SCHEMA_VERSION.into());
    m.insert("command".into(), command.into());
    if let Ok(Value::Object(c)) = serde_json::to_value(config) {
        m.extend(c);
    }
    Value::Object(m)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<path>.config.json` beside a file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize)]
    struct Flags {
        a: Option<u32>,
        b: Option<String>,
    }

    #[derive(Deserialize, Debug, PartialEq)]
    struct Resolved {
        a: u32,
        b: String,
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"a": 1, "b": "file"}"#).unwrap();
        let r: Resolved = resolve(Some(&p), &Flags { a: Some(7), b: None }).unwrap();
        assert_eq!(r, Resolved { a: 7, b: "file".into() });
        assert!(resolve::<Resolved>(None, &Flags { a: Some(7), b: None }).is_err());
    }
}
