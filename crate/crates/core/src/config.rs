//! JSON configuration files with `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::classifier::ClassifierTrainConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::sanity::DrtConfig;
use crate::trainer::TrainConfig;

pub trait Validate {
    fn validate(&self) -> Result<()>;
}

impl Validate for TrainConfig {
    fn validate(&self) -> Result<()> {
        TrainConfig::validate(self)
    }
}

impl Validate for DatasetSpec {
    fn validate(&self) -> Result<()> {
        DatasetSpec::validate(self)
    }
}

impl Validate for DrtConfig {
    fn validate(&self) -> Result<()> {
        DrtConfig::validate(self)
    }
}

impl Validate for ClassifierTrainConfig {
    fn validate(&self) -> Result<()> {
        ClassifierTrainConfig::validate(self)
    }
}

/// Parses an override value as JSON, falling back to a bare string
/// (`mode=ca` works without quotes).
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override in place. The key must already exist
/// unless its parent is an object that is being filled in (tagged enums
/// change their fields with `kind`).
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{assignment}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config("--set", "empty key"));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::config(key, format!("`{}` is not an object", parts[..i].join(".")))
        })?;
        if last {
            if !obj.contains_key(*part) && !obj.contains_key("kind") {
                return Err(Error::config(key, "no such field"));
            }
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(key, "no such field"))?;
    }
    unreachable!("split yields at least one part")
}

/// Builds a config from an optional JSON file (else the type's default),
/// applies overrides in order, then deserialises and validates.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned + Validate,
{
    let doc = match path {
        Some(p) => read_json(p)?,
        None => serde_json::to_value(T::default())?,
    };
    config_from_value(doc, overrides)
}

pub fn read_json(p: &Path) -> Result<Value> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(p.display().to_string(), e.to_string()))
}

/// Applies overrides to `doc`, then deserialises and validates.
pub fn config_from_value<T>(mut doc: Value, overrides: &[String]) -> Result<T>
where
    T: DeserializeOwned + Validate,
{
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: T = serde_json::from_value(doc).map_err(|e| Error::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_a_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = TrainConfig::fix();
        fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let back: TrainConfig = load_config(Some(&p), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn override_changes_exactly_one_field() {
        let base: TrainConfig = load_config(None, &[]).unwrap();
        let changed: TrainConfig =
            load_config(None, &["objective.reg.lambda_tv=0.5".into()]).unwrap();
        let a = serde_json::to_value(&base).unwrap();
        let b = serde_json::to_value(&changed).unwrap();
        let mut diffs = Vec::new();
        diff(&a, &b, String::new(), &mut diffs);
        assert_eq!(diffs, vec!["objective.reg.lambda_tv".to_string()]);
    }

    fn diff(a: &Value, b: &Value, path: String, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, v) in x {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    diff(v, &y[k], p, out);
                }
            }
            _ if a != b => out.push(path),
            _ => {}
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err =
            load_config::<TrainConfig>(None, &["objective.reg.lambda_tv=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("lambda_tv"), "{err}");
        let err = load_config::<TrainConfig>(None, &["bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = load_config::<DatasetSpec>(None, &["clutter_level=2".into()]).unwrap_err();
        assert!(err.to_string().contains("clutter_level"), "{err}");
        assert!(load_config::<TrainConfig>(None, &["steps".into()]).is_err());
    }

    #[test]
    fn bare_strings_and_tagged_enums() {
        let c: TrainConfig = load_config(None, &["mode=fix".into()]).unwrap();
        assert_eq!(c.mode, crate::trainer::TrainMode::Fix);
        let c: TrainConfig = load_config(
            None,
            &["infiller.kind=blur".into(), "infiller.sigma=2.0".into()],
        )
        .unwrap();
        assert_eq!(c.infiller, crate::perturb::Infiller::Blur { sigma: 2.0 });
    }
}
