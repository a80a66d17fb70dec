//! Run configuration: defaults, then a TOML file, then command-line
//! overrides, with the origin of every key recorded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{Hyper, TrainConfig};
use crate::bench::world::WorldSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::knowledge::{DEFAULT_ATTRIBUTE_COUNT, DEFAULT_DESCRIPTIONS};
use crate::rng::hex_digest;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Bank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image feature bank keyed by image id.
    pub images: Option<PathBuf>,
    /// CSV with `image_id,category` rows.
    pub labels: Option<PathBuf>,
    /// Text embedding bank for the precomputed backend.
    pub text_bank: Option<PathBuf>,
    /// Knowledge cache with the descriptions to use.
    pub knowledge: Option<PathBuf>,
    /// Training images per seen category.
    pub shots: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            images: None,
            labels: None,
            text_bank: None,
            knowledge: None,
            shots: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    pub attributes: usize,
    pub descriptions: usize,
    pub stub: bool,
    pub cache: Option<PathBuf>,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            attributes: DEFAULT_ATTRIBUTE_COUNT,
            descriptions: DEFAULT_DESCRIPTIONS,
            stub: false,
            cache: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Base images ranked among seen categories, novel among unseen ones.
    #[default]
    Split,
    /// Every image ranked among all categories.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub ablate_embedding: bool,
    pub diagnostics: bool,
    pub few_shot: Vec<usize>,
    pub target_categories: usize,
    pub target_noise: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Split,
            ablate_embedding: false,
            diagnostics: false,
            few_shot: vec![1, 2, 4, 8, 16],
            target_categories: 4,
            target_noise: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization; world and batch-order seeds follow it
    /// unless set on their own.
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: Hyper,
    pub train: TrainConfig,
    pub knowledge: KnowledgeConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Default,
    File,
    Flag,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Default => "default",
            Origin::File => "file",
            Origin::Flag => "flag",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    /// Dotted key path to where its value came from.
    pub origins: BTreeMap<String, Origin>,
}

fn leaves(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => leaves(t, &path, out),
            _ => out.push(path),
        }
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Reads a flag value as a TOML literal, or as a bare string when it is not one.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the TOML serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    /// Same configuration with every seed except the frozen encoder's
    /// replaced by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.world.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.data.shots == 0 {
            return Err(Error::Config("data.shots must be >= 1".into()));
        }
        if self.data.source == DataSource::Bank && (self.data.images.is_none() || self.data.labels.is_none()) {
            return Err(Error::Config("bank data needs data.images and data.labels".into()));
        }
        Ok(())
    }

    /// Layers `file` and then `overrides` (dotted `key`, raw value) over the
    /// defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ResolvedConfig> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut origins = BTreeMap::new();
        let mut keys = Vec::new();
        leaves(&table, "", &mut keys);
        for k in keys {
            origins.insert(k, Origin::Default);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut keys = Vec::new();
            leaves(&parsed, "", &mut keys);
            for k in keys {
                origins.insert(k, Origin::File);
            }
            merge(&mut table, parsed);
        }
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_value(raw))?;
            origins.insert(key.clone(), Origin::Flag);
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for key in ["world.seed", "train.seed"] {
            if origins.get(key) == Some(&Origin::Default) {
                if key == "world.seed" {
                    config.world.seed = config.seed;
                } else {
                    config.train.seed = config.seed;
                }
                origins.insert(key.to_string(), origins.get("seed").copied().unwrap_or(Origin::Default));
            }
        }
        config.validate()?;
        Ok(ResolvedConfig { config, origins })
    }
}

impl ResolvedConfig {
    pub fn defaults() -> Self {
        Self::from_config(RunConfig::default())
    }

    /// Treats every key of `config` as a default.
    pub fn from_config(config: RunConfig) -> Self {
        let mut origins = BTreeMap::new();
        if let Ok(table) = toml::Table::try_from(&config) {
            let mut keys = Vec::new();
            leaves(&table, "", &mut keys);
            origins = keys.into_iter().map(|k| (k, Origin::Default)).collect();
        }
        Self { config, origins }
    }

    /// TOML of the resolved configuration, preceded by comment lines giving
    /// the version and each key's origin. Loadable as a config file.
    pub fn annotated_toml(&self) -> Result<String> {
        let mut out = format!("# {}\n", crate::VERSION);
        for (k, o) in &self.origins {
            let _ = writeln!(out, "# {k}: {}", o.name());
        }
        out.push('\n');
        out.push_str(&self.config.to_toml()?);
        Ok(out)
    }
}
