//! Experiment configuration files (TOML or JSON) with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use fedgrid_core::data::{CrossSignal, PowerProfile};
use fedgrid_core::hfl::HflConfig;
use fedgrid_core::learners::LstmConfig;
use fedgrid_core::secureboost::SbConfig;
use fedgrid_core::vflr::VflrConfig;

use crate::error::{AppError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolName {
    Hfl,
    Vflr,
    Secureboost,
}

impl ProtocolName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::Hfl => "hfl",
            ProtocolName::Vflr => "vflr",
            ProtocolName::Secureboost => "secureboost",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfl: Option<HflSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vflr: Option<VflrSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secureboost: Option<SbSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HflSection {
    pub data: SeriesSource,
    #[serde(default = "hfl_model")]
    pub model: LstmConfig,
    #[serde(default)]
    pub engine: HflConfig,
}

fn hfl_model() -> LstmConfig {
    LstmConfig {
        hidden_size: 8,
        fc_hidden: 8,
        ..LstmConfig::default()
    }
}

/// One series per party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum SeriesSource {
    Synthetic {
        #[serde(default = "three")]
        parties: usize,
        #[serde(default)]
        profile: PowerProfile,
        /// Windowed samples kept per party; all when absent.
        #[serde(default)]
        samples_per_party: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        paths: Vec<PathBuf>,
        #[serde(default)]
        samples_per_party: Option<usize>,
    },
}

fn three() -> usize {
    3
}

/// Feature tables of parties A and B (B carries the labels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum TableSource {
    Synthetic {
        n_samples: usize,
        n_a: usize,
        n_b: usize,
        #[serde(default)]
        signal: CrossSignal,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VflrSection {
    pub data: TableSource,
    #[serde(default)]
    pub engine: VflrConfig,
    /// Replace A's features with zeros (single-party baseline).
    #[serde(default)]
    pub ablate_a: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbSection {
    pub data: TableSource,
    #[serde(default)]
    pub engine: SbConfig,
    #[serde(default)]
    pub ablate_a: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let (want, present) = match self.protocol {
            ProtocolName::Hfl => ("hfl", self.hfl.is_some()),
            ProtocolName::Vflr => ("vflr", self.vflr.is_some()),
            ProtocolName::Secureboost => ("secureboost", self.secureboost.is_some()),
        };
        if !present {
            return Err(AppError::Config(format!("missing [{want}] section")));
        }
        let sections = [self.hfl.is_some(), self.vflr.is_some(), self.secureboost.is_some()];
        if sections.iter().filter(|s| **s).count() > 1 {
            return Err(AppError::Config("exactly one protocol section is allowed".into()));
        }
        let field = |name: &str, e: fedgrid_core::Error| AppError::Config(format!("{name}: {e}"));
        if let Some(h) = &self.hfl {
            h.engine.validate().map_err(|e| field("hfl.engine", e))?;
            h.model.validate().map_err(|e| field("hfl.model", e))?;
            match &h.data {
                SeriesSource::Synthetic { parties: 0, .. } => {
                    return Err(AppError::Config("hfl.data.parties must be at least 1".into()))
                }
                SeriesSource::Csv { paths, .. } if paths.is_empty() => {
                    return Err(AppError::Config("hfl.data.paths must not be empty".into()))
                }
                _ => {}
            }
        }
        if let Some(v) = &self.vflr {
            v.engine.validate().map_err(|e| field("vflr.engine", e))?;
            check_table_source("vflr.data", &v.data)?;
        }
        if let Some(s) = &self.secureboost {
            s.engine.validate().map_err(|e| field("secureboost.engine", e))?;
            check_table_source("secureboost.data", &s.data)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = canonical(&serde_json::to_value(self).expect("config serializes"));
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    /// Sets every seed in the config (engine and synthetic data).
    pub fn set_seed(&mut self, seed: u64) {
        fn data_seed(d: &mut TableSource, seed: u64) {
            if let TableSource::Synthetic { seed: s, .. } = d {
                *s = seed;
            }
        }
        if let Some(h) = &mut self.hfl {
            h.engine.seed = seed;
            if let SeriesSource::Synthetic { seed: s, .. } = &mut h.data {
                *s = seed;
            }
        }
        if let Some(v) = &mut self.vflr {
            v.engine.seed = seed;
            data_seed(&mut v.data, seed);
        }
        if let Some(b) = &mut self.secureboost {
            b.engine.seed = seed;
            data_seed(&mut b.data, seed);
        }
    }
}

fn check_table_source(name: &str, d: &TableSource) -> Result<()> {
    if let TableSource::Synthetic { n_samples, n_a, n_b, .. } = d {
        if *n_samples == 0 || *n_a == 0 || *n_b == 0 {
            return Err(AppError::Config(format!(
                "{name}: n_samples, n_a and n_b must be positive"
            )));
        }
    }
    Ok(())
}

/// JSON with object keys sorted at every level.
pub fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn parse_text(text: &str, json: bool) -> Result<Value> {
    if json {
        serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    } else {
        let v: toml::Value = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| AppError::Config(e.to_string()))
    }
}

/// Applies `a.b.c=value`; the value is read as JSON when it parses, as a
/// string otherwise. Intermediate tables are created as needed.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override '{spec}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| AppError::Config(format!("override '{path}': '{part}' is not inside a table")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn parse_config(text: &str, json: bool, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut v = parse_text(text, json)?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| AppError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e == "json");
    parse_config(&text, json, overrides).map_err(|e| match e {
        AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
