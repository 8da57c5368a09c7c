//! Strict JSON configs with dotted `key=value` overrides.

use std::fs;
use std::path::Path;

use care_core::error::{CareError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Loads `path` (or the defaults), applies overrides and deserialises
/// strictly. Override keys must exist in the schema.
pub fn load<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<T> {
    let schema = serde_json::to_value(T::default())?;
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CareError::Input(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CareError::Config(format!("{}: {e}", p.display())))?;
            // validate the file on its own so unknown keys are reported early
            serde_json::from_value::<T>(v.clone()).map_err(|e| CareError::Config(format!("{}: {e}", p.display())))?;
            serde_json::to_value(serde_json::from_value::<T>(v)?)?
        }
        None => schema.clone(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CareError::Config(format!("override `{o}` is not key=value")))?;
        if lookup(&schema, key).is_none() {
            return Err(CareError::Config(format!("unknown config key `{key}`")));
        }
        let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *lookup_mut(&mut value, key).ok_or_else(|| CareError::Config(format!("unknown config key `{key}`")))? = new;
    }
    if let Some(seed) = seed {
        match lookup_mut(&mut value, "seed") {
            Some(v) => *v = Value::from(seed),
            None => return Err(CareError::Config("this config has no seed".into())),
        }
    }
    serde_json::from_value(value).map_err(|e| CareError::Config(e.to_string()))
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |v, k| v.as_object()?.get(k))
}

fn lookup_mut<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(v, |v, k| v.as_object_mut()?.get_mut(k))
}

/// `key = default` lines for every leaf of the schema.
pub fn schema_help<T: Serialize + Default>() -> String {
    let mut lines = Vec::new();
    flatten("", &serde_json::to_value(T::default()).expect("serialisable"), &mut lines);
    let mut out = String::from("Config keys (defaults):\n");
    for l in lines {
        out.push_str("  ");
        out.push_str(&l);
        out.push('\n');
    }
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push(format!("{prefix} = {v}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use care_core::pretrain::PretrainConfig;

    #[test]
    fn overrides_touch_nested_keys() {
        let c: PretrainConfig = load(None, &["model.d_l=32".into(), "objective=frame_only".into()], Some(5)).unwrap();
        assert_eq!(c.model.d_l, 32);
        assert_eq!(c.objective.name(), "frame_only");
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn unknown_override_names_the_key() {
        let e = load::<PretrainConfig>(None, &["model.bogus=1".into()], None).unwrap_err();
        assert!(e.is_validation() && e.to_string().contains("model.bogus"));
    }

    #[test]
    fn help_lists_every_leaf() {
        let h = schema_help::<PretrainConfig>();
        assert!(h.contains("batch_size = 32") && h.contains("model.image_size = 64"));
    }
}
