//! JSON run configuration: defaults, named presets, user overrides.
//!
//! A document is merged onto the defaults in three layers: the built-in
//! defaults, then every preset named under `"preset"` (a string or a list,
//! applied in order), then the document itself. Objects merge key by key;
//! everything else replaces. Unknown keys are rejected with their path.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::harness::RunConfig;

pub const PRESETS: &[&str] = &[
    "imagenet-r-like",
    "cifar100-like",
    "cub200-like",
    "imagenet-a-like",
    "oneprompt-table",
    "oneprompt-deep",
    "fig1",
];

pub fn preset(name: &str) -> Option<Value> {
    Some(match name {
        "imagenet-r-like" | "cifar100-like" => json!({}),
        "cub200-like" => json!({ "npos": { "sigma": 0.1, "alpha": 4.0, "beta": 60.0, "k": 100 } }),
        "imagenet-a-like" => json!({
            "vor": { "tau_current": -15.0 },
            "npos": { "sigma": 1.0, "alpha": 4.0, "beta": 60.0, "k": 100 }
        }),
        "oneprompt-table" => json!({ "encoder": { "prompt_lengths": [5, 5, 5, 20, 20] } }),
        "oneprompt-deep" => json!({ "encoder": { "prompt_lengths": [5, 5, 5, 5, 5] } }),
        // Two tasks of two classes on a circle, scaled down: energy thresholds
        // follow the much smaller logit range of a 16-wide encoder.
        "fig1" => json!({
            "mode": "prompted",
            "epochs": 20,
            "batch_size": 128,
            "optimizer": { "lr": 0.002 },
            "encoder": {
                "num_layers": 2, "model_dim": 16, "num_heads": 2, "token_count": 3,
                "mlp_dim": 32, "input_dim": 2, "prompt_lengths": [5, 5]
            },
            "vor": { "lambda": 1.0, "tau_current": -5.0, "tau_outlier": 0.0 },
            "npos": { "k": 20, "alpha": 10.0, "beta": 160.0 },
            "data": {
                "kind": "synthetic", "tasks": 2, "classes_per_task": 2,
                "train_per_class": 100, "test_per_class": 200, "dim": 2,
                "radius": 3.0, "angular_jitter": 0.0, "class_std": 1.0
            }
        }),
        _ => return None,
    })
}

/// Deep merge of `over` into `base`. Objects tagged with a different `kind`
/// replace rather than merge.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

pub fn defaults_value() -> Value {
    serde_json::to_value(RunConfig::default()).expect("defaults serialize")
}

fn preset_names(v: &Value) -> Result<Vec<String>> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::config("preset", "entries must be strings"))
            })
            .collect(),
        _ => Err(Error::config("preset", "must be a string or a list of strings")),
    }
}

/// Default-filled, preset-expanded JSON for a user document, before typing.
pub fn resolve_value(user: &Value) -> Result<Value> {
    let mut user = match user {
        Value::Object(m) => m.clone(),
        _ => return Err(Error::config("", "the configuration must be a JSON object")),
    };
    let names = match user.remove("preset") {
        Some(v) => preset_names(&v)?,
        None => Vec::new(),
    };
    let mut value = defaults_value();
    for name in &names {
        let p = preset(name).ok_or_else(|| {
            Error::config(
                "preset",
                format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")),
            )
        })?;
        merge(&mut value, &p);
    }
    merge(&mut value, &Value::Object(user));
    Ok(value)
}

/// Types and validates a resolved document.
pub fn config_from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        Error::config(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_run_config_str(text: &str) -> Result<RunConfig> {
    let user: Value = serde_json::from_str(text)?;
    config_from_value(resolve_value(&user)?)
}

pub fn parse_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config_str(&text)
}

/// Every leaf key of the default configuration with its value, in dotted form.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &defaults_value(), &mut out);
    out
}

/// Sets a dotted path inside a JSON object, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, "path runs through a non-object value"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

pub fn get_path<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |v, p| v.get(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::EncoderMode;
    use crate::regularizer::LossShape;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_run_config_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.vor.lambda, 0.1);
        assert_eq!((cfg.vor.tau_current, cfg.vor.tau_outlier), (-24.0, -3.0));
        assert_eq!(
            (cfg.npos.sigma, cfg.npos.alpha, cfg.npos.beta, cfg.npos.k),
            (1.0, 10.0, 160.0, 100)
        );
        assert_eq!(cfg.npos.noise_pool, 600);
        assert_eq!(cfg.reg_fraction, 0.2);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.encoder.prompt_lengths, vec![5, 5, 20, 20, 20]);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn presets_apply() {
        let cfg = parse_run_config_str(r#"{"preset": "cub200-like"}"#).unwrap();
        assert_eq!((cfg.npos.sigma, cfg.npos.alpha, cfg.npos.beta), (0.1, 4.0, 60.0));
        let cfg = parse_run_config_str(r#"{"preset": ["imagenet-a-like", "oneprompt-table"]}"#).unwrap();
        assert_eq!(cfg.vor.tau_current, -15.0);
        assert_eq!(cfg.encoder.prompt_lengths, vec![5, 5, 5, 20, 20]);
        let cfg = parse_run_config_str(r#"{"preset": "fig1", "vor": {"shape": "mse"}}"#).unwrap();
        assert_eq!(cfg.vor.shape, LossShape::Mse);
        assert_eq!(cfg.mode, EncoderMode::Prompted);
        assert!(parse_run_config_str(r#"{"preset": "nope"}"#).is_err());
    }

    #[test]
    fn errors_carry_paths() {
        let err = parse_run_config_str(r#"{"vor": {"lambda": -1}}"#).unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path == "vor.lambda"),
            "{err}"
        );
        let err = parse_run_config_str(r#"{"npos": {"sigmaa": 1}}"#).unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path.starts_with("npos")),
            "{err}"
        );
        let err = parse_run_config_str(r#"{"epochs": "ten"}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "epochs"), "{err}");
        assert!(parse_run_config_str("[1]").is_err());
        assert!(parse_run_config_str("{").unwrap_err().is_validation());
    }

    #[test]
    fn data_kind_switch_replaces() {
        let cfg = parse_run_config_str(
            r#"{"mode": "identity", "regularizer": false,
                "data": {"kind": "embeddings", "train": "a", "test": "b", "classes_per_task": 2}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.data, crate::harness::DataSource::Embeddings { .. }));
    }

    #[test]
    fn key_listing_covers_nested_fields() {
        let keys = config_keys();
        assert!(keys.iter().any(|(k, v)| k == "vor.lambda" && v == "0.1"));
        assert!(keys.iter().any(|(k, v)| k == "npos.k" && v == "100"));
        assert!(keys.iter().any(|(k, _)| k == "data.radius"));
    }
}
