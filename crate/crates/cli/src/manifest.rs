//! Run manifests and layered configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "MVP_FORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sourced {
    pub value: Value,
    pub source: Source,
}

pub type ConfigSnapshot = BTreeMap<String, Sourced>;

/// Record `value` under `name` and hand it back.
pub fn record<V: Serialize>(snapshot: &mut ConfigSnapshot, name: &str, value: V, source: Source) -> V {
    let json = serde_json::to_value(&value).unwrap_or(Value::Null);
    snapshot.insert(name.to_string(), Sourced { value: json, source });
    value
}

/// Picks flag over default, recording which one won.
pub fn pick<V: Serialize>(snapshot: &mut ConfigSnapshot, name: &str, flag: Option<V>, default: V) -> V {
    match flag {
        Some(v) => record(snapshot, name, v, Source::Flag),
        None => record(snapshot, name, default, Source::Default),
    }
}

/// Seed from the flag, then `MVP_FORGE_SEED`, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: Option<(u64, Source)>) -> anyhow::Result<(u64, Source)> {
    if let Some(s) = flag {
        return Ok((s, Source::Flag));
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let s = raw.trim().parse().with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
        return Ok((s, Source::Env));
    }
    Ok(fallback.unwrap_or((0, Source::Default)))
}

/// Builds a config struct from its defaults, then a TOML file, then flags.
///
/// `flags` holds only the fields given on the command line. Unknown keys in
/// the file are rejected.
pub fn layered<C: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    flags: Vec<(&str, Value)>,
    snapshot: &mut ConfigSnapshot,
) -> anyhow::Result<C> {
    let Value::Object(mut merged) = serde_json::to_value(C::default())? else {
        bail!("config type does not serialize to a table");
    };
    let mut sources: BTreeMap<String, Source> = merged.keys().map(|k| (k.clone(), Source::Default)).collect();

    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(from_file) = serde_json::to_value(table)? else { unreachable!("toml table") };
        overlay(&mut merged, &mut sources, from_file, Source::File)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    let from_flags: Map<String, Value> = flags.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    overlay(&mut merged, &mut sources, from_flags, Source::Flag)?;

    for (k, v) in &merged {
        snapshot.insert(k.clone(), Sourced { value: v.clone(), source: sources[k] });
    }
    serde_json::from_value(Value::Object(merged)).context("invalid configuration")
}

fn overlay(
    merged: &mut Map<String, Value>,
    sources: &mut BTreeMap<String, Source>,
    layer: Map<String, Value>,
    source: Source,
) -> anyhow::Result<()> {
    for (k, v) in layer {
        if !merged.contains_key(&k) {
            let known: Vec<&str> = merged.keys().map(String::as_str).collect();
            bail!("unknown field {k:?}; expected one of {}", known.join(", "));
        }
        merged.insert(k.clone(), v);
        sources.insert(k, source);
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: ConfigSnapshot,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
}

/// Collects what a command read and wrote; `finish` writes `manifest.json`.
pub struct Run {
    pub command: &'static str,
    pub out_dir: PathBuf,
    pub config: ConfigSnapshot,
    pub seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started_at: String,
}

impl Run {
    pub fn start(command: &'static str, out_dir: Option<PathBuf>) -> Self {
        Self {
            command,
            out_dir: out_dir.unwrap_or_else(|| Path::new("mvp-out").join(command)),
            config: ConfigSnapshot::new(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Path of an output file inside the run directory, created on demand.
    pub fn output(&mut self, name: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(name);
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write_json<V: Serialize>(&mut self, name: &str, value: &V) -> anyhow::Result<PathBuf> {
        let path = self.output(name)?;
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join("manifest.json");
        let manifest = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
