use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Flat `key = value` experiment configuration. Training keys are bare,
/// generator keys are prefixed with `synth.`, and `data` names a dataset.
/// Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: Option<String>,
}

fn err(message: String) -> Error {
    Error::config("config", message)
}

fn as_map<T: serde::Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    }
}

fn set_field<T: serde::Serialize + serde::de::DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<()> {
    let mut map = as_map(target);
    let slot = map.get_mut(key).ok_or_else(|| err(format!("unknown key `{key}`")))?;
    let bad = || err(format!("invalid value `{raw}` for `{key}`"));
    *slot = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            Value::from(v)
        }
        _ => Value::String(raw.to_string()),
    };
    *target = serde_json::from_value(Value::Object(map)).map_err(|_| bad())?;
    Ok(())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "data" {
            self.data = Some(value.to_string());
            Ok(())
        } else if let Some(k) = key.strip_prefix("synth.") {
            set_field(&mut self.synth, k, value).map_err(|_| err(format!("unknown key or invalid value: `{key}` = `{value}`")))
        } else {
            set_field(&mut self.train, key, value)
        }
    }

    /// Applies `key=value` text: one assignment per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its effective value.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let fmt = |v: &Value| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let mut out: BTreeMap<String, String> = as_map(&self.train).iter().map(|(k, v)| (k.clone(), fmt(v))).collect();
        for (k, v) in as_map(&self.synth) {
            out.insert(format!("synth.{k}"), fmt(&v));
        }
        if let Some(d) = &self.data {
            out.insert("data".into(), d.clone());
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
