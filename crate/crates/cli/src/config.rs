//! Config resolution: built-in defaults, then the config file, then flags.
//! Every key remembers which layer supplied its final value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dmnil::datagen::SyntheticSpec;
use dmnil::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.dmpw";
pub const DRONE_FILE: &str = "drone.dmfv";
pub const SATELLITE_FILE: &str = "satellite.dmfv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

/// On-disk config file layout.
///
/// ```toml
/// [train]
/// epochs = 10
/// ablation = "dhml"
///
/// [data]
/// drone = "corpus/drone.dmfv"
/// satellite = "corpus/satellite.dmfv"
/// # or, instead of paths:
/// [data.synthetic]
/// num_locations = 32
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub drone: Option<PathBuf>,
    pub satellite: Option<PathBuf>,
    pub synthetic: Option<Map<String, Value>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let json = serde_json::to_value(table).map_err(|e| CliError::config(e.to_string()))?;
        let mut file: ConfigFile =
            serde_json::from_value(json).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // Relative corpus paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut file.data.drone, &mut file.data.satellite].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }
}

/// Parses the right-hand side of `KEY=VALUE` as a TOML value, falling back
/// to a bare string so `ablation=dhml` works without quotes.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("expected KEY=VALUE, got {s:?}")))?;
    let key = k.trim().to_string();
    if key.is_empty() {
        return Err(CliError::config(format!("empty key in {s:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", v.trim())) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key present")).map_err(|e| CliError::config(e.to_string()))?,
        Err(_) => Value::String(v.trim().to_string()),
    };
    Ok((key, value))
}

/// Layers `file` and `flags` over the serialized defaults of `T`.
///
/// Keys of nested tables (e.g. `coefficients.icel`) are addressed with dots.
/// Unknown keys surface as config errors when the merged value is decoded.
pub fn resolve<T>(
    prefix: &str,
    file: &Map<String, Value>,
    flags: &[(String, Value)],
) -> Result<(T, BTreeMap<String, Source>), CliError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut merged = serde_json::to_value(T::default()).map_err(|e| CliError::config(e.to_string()))?;
    let mut sources = BTreeMap::new();
    collect_leaves(&merged, "", &mut |k| {
        sources.insert(format!("{prefix}{k}"), Source::Default);
    });
    for (k, v) in file {
        overlay(&mut merged, k, v.clone(), prefix, Source::File, &mut sources)?;
    }
    for (k, v) in flags {
        overlay(&mut merged, k, v.clone(), prefix, Source::Flag, &mut sources)?;
    }
    let value: T = serde_json::from_value(merged).map_err(|e| CliError::config(format!("{prefix}{e}")))?;
    Ok((value, sources))
}

fn collect_leaves(v: &Value, path: &str, f: &mut dyn FnMut(&str)) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                collect_leaves(child, &p, f);
            }
        }
        _ => f(path),
    }
}

fn overlay(
    root: &mut Value,
    key: &str,
    value: Value,
    prefix: &str,
    source: Source,
    sources: &mut BTreeMap<String, Source>,
) -> Result<(), CliError> {
    // A table from the config file spreads over its leaves.
    if let Value::Object(m) = value {
        for (k, v) in m {
            overlay(root, &format!("{key}.{k}"), v, prefix, source, sources)?;
        }
        return Ok(());
    }
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| CliError::config(format!("unknown key {prefix}{key}")))?,
            _ => return Err(CliError::config(format!("{prefix}{key} is not a table"))),
        };
    }
    *slot = value;
    sources.insert(format!("{prefix}{key}"), source);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic { spec: SyntheticSpec },
    Files { drone: PathBuf, satellite: PathBuf },
}

/// Fully resolved description of a training run, written before training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub parallel: bool,
    pub config: TrainConfig,
    pub corpus: CorpusSource,
    pub sources: BTreeMap<String, Source>,
}

/// Written next to a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub tool_version: String,
    pub spec: SyntheticSpec,
    pub drone: PathBuf,
    pub satellite: PathBuf,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, CliError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
