//! Flat `section.key = value` run configuration.
//!
//! Every key has a default, so an empty file is a complete config. Values
//! are typed by the default they replace; `none` clears an optional width.

use std::fmt::Write as _;
use std::path::Path;

use mnm_core::golfer::GolferConfig;
use mnm_core::losstrain::TrainConfig;
use mnm_core::scene::GeneratorConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Config problem; always maps to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { k: 6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub threshold_m: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold_m: mnm_core::ensemble::DEFAULT_MISS_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: GolferConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub metrics: MetricsConfig,
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "ensemble", "metrics"];

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config sections serialise") {
        Value::Object(m) => m,
        _ => unreachable!("config sections are structs"),
    }
}

fn from_map<T: DeserializeOwned>(m: &Map<String, Value>) -> Result<T, String> {
    serde_json::from_value(Value::Object(m.clone())).map_err(|e| e.to_string())
}

/// Parses `raw` as a replacement for `default`, keeping its JSON type.
fn typed_value(default: &Value, raw: &str) -> Result<Value, String> {
    let as_uint = |raw: &str| {
        raw.parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got `{raw}`"))
    };
    match default {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got `{raw}`")),
        Value::Number(n) if n.is_u64() => as_uint(raw),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| format!("expected a number, got `{raw}`"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| format!("expected a finite number, got `{raw}`"))
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null => match raw {
            "none" => Ok(Value::Null),
            _ => as_uint(raw),
        },
        _ => Err("unsupported value type".into()),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let defaults = RunConfig::default();
        let mut maps = defaults.maps();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| ConfigError(format!("line {}: {m}", n + 1));
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, got `{line}`")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| err(format!("key `{key}` has no section")))?;
            let idx = SECTIONS
                .iter()
                .position(|s| *s == section)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            let map = &mut maps[idx];
            let default = map
                .get(field)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            let value = typed_value(default, raw).map_err(|m| err(format!("{key}: {m}")))?;
            map.insert(field.to_string(), value);
            // surfaces enum and option errors against the key that caused them
            Self::from_maps(&maps).map_err(|m| err(format!("{key}: {m}")))?;
        }
        let cfg = Self::from_maps(&maps).map_err(ConfigError)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    fn maps(&self) -> [Map<String, Value>; 5] {
        [
            to_map(&self.data),
            to_map(&self.model),
            to_map(&self.train),
            to_map(&self.ensemble),
            to_map(&self.metrics),
        ]
    }

    fn from_maps(maps: &[Map<String, Value>; 5]) -> Result<Self, String> {
        Ok(Self {
            data: from_map(&maps[0])?,
            model: from_map(&maps[1])?,
            train: from_map(&maps[2])?,
            ensemble: from_map(&maps[3])?,
            metrics: from_map(&maps[4])?,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: mnm_core::Error| ConfigError(e.to_string());
        self.data.validate().map_err(core)?;
        self.model.validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        if self.ensemble.k == 0 {
            return Err(ConfigError("ensemble.k must be >= 1".into()));
        }
        if !(self.metrics.threshold_m > 0.0) {
            return Err(ConfigError(format!(
                "metrics.threshold_m = {} must be positive",
                self.metrics.threshold_m
            )));
        }
        Ok(())
    }

    /// Every effective key, one `section.key = value` per line.
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        for (section, map) in SECTIONS.iter().zip(self.maps()) {
            for (k, v) in &map {
                writeln!(out, "{section}.{k} = {}", render(v)).expect("string write");
            }
        }
        out
    }
}
