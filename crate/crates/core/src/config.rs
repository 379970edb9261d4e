//! Declarative run configuration: strict JSON, defaults, file, then overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SuiteSpec;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, SweepAxis};
use crate::training::{PretrainConfig, TuneConfig};

/// Sweep axis name that selects the four-cell ablation grid.
pub const ABLATION_AXIS: &str = "ablation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// `mask_ratio`, `lambda`, `k`, `strategy`, or `ablation` for the
    /// four-cell conditioning/kg grid.
    pub axis: String,
    pub values: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: "lambda".to_string(),
            values: ["0", "1", "2", "4", "6", "8", "10"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of `<run-id>/` directories.
    pub root: String,
    /// Fixed run id; derived from the command and resolved config when absent.
    pub run_id: Option<String>,
    /// Encoder cache; `<root>/cache` when absent.
    pub cache_dir: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            root: "runs".to_string(),
            run_id: None,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub data: SuiteSpec,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
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

/// Parses `a.b.c=value`. The value is read as JSON when possible, otherwise
/// as a bare string; `a,b,c` lists become arrays of strings for string-list fields.
fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let keys: Vec<String> = path.split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

fn set_path(root: &mut Value, keys: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            let slot = obj
                .get_mut(k)
                .ok_or_else(|| Error::Config(format!("unknown config key {}", keys.join("."))))?;
            *slot = coerce(slot, value);
            return Ok(());
        }
        cur = obj
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("unknown config key {}", keys[..=i].join("."))))?;
    }
    Ok(())
}

/// Turns comma lists into arrays and numbers into strings where the slot expects them.
fn coerce(slot: &Value, value: Value) -> Value {
    match (slot, value) {
        (Value::Array(existing), Value::String(s)) => {
            let as_numbers = existing.first().is_some_and(Value::is_number);
            Value::Array(
                s.split(',')
                    .map(|p| {
                        let p = p.trim();
                        if as_numbers {
                            serde_json::from_str(p).unwrap_or_else(|_| Value::String(p.to_string()))
                        } else {
                            Value::String(p.to_string())
                        }
                    })
                    .collect(),
            )
        }
        (Value::Array(existing), Value::Number(n)) => {
            if existing.first().is_some_and(Value::is_string) {
                Value::Array(vec![Value::String(n.to_string())])
            } else {
                Value::Array(vec![Value::Number(n)])
            }
        }
        (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
        (Value::Null, Value::Number(n)) => Value::String(n.to_string()),
        (_, v) => v,
    }
}

impl Config {
    /// Defaults, then the JSON file, then each `key=value` override.
    /// Returns the config and its resolved JSON form.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<(Self, Value)> {
        let doc = match file {
            None => None,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some((v, path.display().to_string()))
            }
        };
        Self::resolve_from(doc, overrides)
    }

    /// Like [`Config::resolve`] with an in-memory JSON document in place of
    /// the file; `origin` names it in error messages.
    pub fn resolve_value(doc: Value, origin: &str, overrides: &[String]) -> Result<(Self, Value)> {
        Self::resolve_from(Some((doc, origin.to_string())), overrides)
    }

    fn resolve_from(doc: Option<(Value, String)>, overrides: &[String]) -> Result<(Self, Value)> {
        let mut value = serde_json::to_value(Config::default())?;
        if let Some((doc, origin)) = doc {
            if !doc.is_object() {
                return Err(Error::Config(format!("{origin} must hold a JSON object")));
            }
            // Strict check against the schema before merging.
            serde_json::from_value::<Config>(doc.clone())
                .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
            merge(&mut value, doc);
        }
        for o in overrides {
            let (keys, v) = parse_override(o)?;
            set_path(&mut value, &keys, v)?;
        }
        let cfg: Config = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        let resolved = serde_json::to_value(&cfg)?;
        Ok((cfg, resolved))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |what: &str, e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(format!("{what}: {other}")),
        };
        self.encoder.validate().map_err(|e| wrap("encoder", e))?;
        self.pretrain.validate().map_err(|e| wrap("pretrain", e))?;
        self.data.validate().map_err(|e| wrap("data", e))?;
        self.tune.resolve().map_err(|e| wrap("tune", e))?;
        self.eval
            .parsed_shifts()
            .map_err(|e| wrap("eval.shifts", e))?;
        if self.tune.k > self.data.samples_per_class {
            return Err(Error::Config(format!(
                "tune.k = {} exceeds data.samples_per_class = {}",
                self.tune.k, self.data.samples_per_class
            )));
        }
        if self.sweep.axis != ABLATION_AXIS {
            let axis: SweepAxis = self.sweep.axis.parse().map_err(|e| wrap("sweep.axis", e))?;
            if self.sweep.values.is_empty() {
                return Err(Error::Config("sweep.values is empty".into()));
            }
            for v in &self.sweep.values {
                axis.apply(&self.tune, v, self.data.samples_per_class)
                    .map_err(|e| wrap("sweep.values", e))?;
            }
        }
        if self.encoder.image_side != self.data.image_side
            || self.encoder.channels != self.data.channels
        {
            return Err(Error::Config(
                "data image shape does not match the encoder".into(),
            ));
        }
        Ok(())
    }

    /// Config as it should be recorded: tune section with the per-method rules applied.
    pub fn resolved_value(&self) -> Result<Value> {
        let mut c = self.clone();
        c.tune = c.tune.resolve()?;
        Ok(serde_json::to_value(c)?)
    }

    /// `<command>-<first 12 hex digits of sha256(resolved config)>` unless fixed.
    pub fn run_id(&self, command: &str, args: &Value) -> Result<String> {
        if let Some(id) = &self.output.run_id {
            return Ok(id.clone());
        }
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&self.resolved_value()?)?);
        h.update(serde_json::to_vec(args)?);
        Ok(format!("{command}-{}", &hex::encode(h.finalize())[..12]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::Method;

    #[test]
    fn precedence_defaults_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"tune": {"lambda": 4.0, "epochs": 3}}"#).unwrap();
        let (c, _) = Config::resolve(Some(&p), &["tune.lambda=1.5".into()]).unwrap();
        assert_eq!(c.tune.lambda, 1.5);
        assert_eq!(c.tune.epochs, 3);
        assert_eq!(c.tune.lr, 0.02);
        let (c, _) = Config::resolve(
            None,
            &["tune.method=cocoop".into(), "tune.seeds=5,6".into()],
        )
        .unwrap();
        assert_eq!(c.tune.method, Method::Cocoop);
        assert_eq!(c.tune.seeds, vec![5, 6]);
        let (c, _) = Config::resolve(
            None,
            &["sweep.values=0.25,0.5".into(), "output.run_id=x".into()],
        )
        .unwrap();
        assert_eq!(c.sweep.values, vec!["0.25", "0.5"]);
        assert_eq!(c.output.run_id.as_deref(), Some("x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"tune": {"lamda": 4.0}}"#).unwrap();
        assert!(matches!(
            Config::resolve(Some(&p), &[]),
            Err(Error::Config(_))
        ));
        std::fs::write(&p, r#"{"tunes": {}}"#).unwrap();
        assert!(matches!(
            Config::resolve(Some(&p), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::resolve(None, &["tune.nope=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::resolve(None, &["tune.lambda=-1".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn defaults_record_promim_protocol() {
        let (c, _) = Config::resolve(None, &[]).unwrap();
        let v = c.resolved_value().unwrap();
        assert_eq!(v["tune"]["method"], "promim");
        assert_eq!(v["tune"]["lr"], 0.02);
        assert_eq!(v["tune"]["n_ctx"], 4);
        assert_eq!(v["tune"]["lambda"], 2.0);
        assert_eq!(v["tune"]["mask"]["ratio"], 0.75);
        let id = c.run_id("tune", &Value::Null).unwrap();
        assert_eq!(id, c.run_id("tune", &Value::Null).unwrap());
        assert!(id.starts_with("tune-"));
    }
}
