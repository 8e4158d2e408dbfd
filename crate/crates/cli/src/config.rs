//! Config-file-first plumbing: every subcommand reads a TOML or JSON
//! config, command-line flags override individual keys, and each run
//! writes a manifest (command, resolved config, seed, output hashes)
//! that can itself be passed back as `--config` to reproduce the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Parses a config file into a JSON value. `.toml` parses as TOML,
/// `.json` as JSON; anything else tries JSON first, then TOML.
pub fn load_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml_value(&text)?,
        Some("json") => serde_json::from_str(&text)?,
        _ => serde_json::from_str(&text).or_else(|_| toml_value(&text))?,
    };
    Ok(parsed)
}

fn toml_value(text: &str) -> Result<Value> {
    let value: toml::Value = toml::from_str(text)?;
    Ok(serde_json::to_value(value)?)
}

/// A previous run's manifest doubles as a config: the resolved config
/// is nested under "config" next to "command".
fn unwrap_manifest(value: Value) -> Value {
    match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            map.remove("config").expect("key checked")
        }
        other => other,
    }
}

#[derive(Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub oracle: Option<String>,
    pub oracle_url: Option<String>,
    pub oracle_model: Option<String>,
}

impl Overrides {
    fn apply(&self, value: &mut Value) {
        if !value.is_object() {
            return;
        }
        let map = value.as_object_mut().expect("checked object");
        if let Some(seed) = self.seed {
            map.insert("seed".into(), seed.into());
        }
        if let Some(out) = &self.out {
            map.insert("out".into(), out.display().to_string().into());
        }
        if let Some(workers) = self.workers {
            map.insert("workers".into(), workers.into());
        }
        if let Some(oracle) = &self.oracle {
            map.insert("oracle".into(), oracle.as_str().into());
        }
        if let Some(url) = &self.oracle_url {
            map.insert("oracle_url".into(), url.as_str().into());
        }
        if let Some(model) = &self.oracle_model {
            map.insert("oracle_model".into(), model.as_str().into());
        }
    }
}

/// Loads the optional config file, layers flag overrides on top, and
/// deserializes the result. With no file the config starts empty, so
/// every required key must have a default or an override.
pub fn resolve<T: DeserializeOwned>(path: Option<&Path>, overrides: &Overrides) -> Result<T> {
    let mut value = match path {
        Some(path) => unwrap_manifest(load_value(path)?),
        None => Value::Object(serde_json::Map::new()),
    };
    if !value.is_object() {
        bail!("config root must be a table/object");
    }
    overrides.apply(&mut value);
    Ok(serde_json::from_value(value).context("invalid config")?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: Value,
    outputs: BTreeMap<String, String>,
}

/// Writes `manifest.json` into the output directory: command name,
/// seed, the fully resolved config, and a sha256 per output file.
pub fn write_manifest<C: Serialize>(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: &C,
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let mut hashes = BTreeMap::new();
    for path in outputs {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| path.display().to_string());
        hashes.insert(name, sha256_file(path)?);
    }
    let manifest = RunManifest {
        command,
        seed,
        config: serde_json::to_value(config)?,
        outputs: hashes,
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Resolved output directory: config value if set, else `out/<command>`.
pub fn out_dir(configured: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = configured
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new("out").join(command));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output dir {}", dir.display()))?;
    Ok(dir)
}
