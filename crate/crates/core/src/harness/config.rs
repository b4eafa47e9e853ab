//! `key = value` and JSON config files layered over a [`RunSpec`].

use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::RunSpec;
use crate::attention::parse_variant_list;
use crate::error::{Error, Result};

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunSpec {
    /// Keys accepted by [`RunSpec::set`].
    pub const KEYS: [&'static str; 23] = [
        "profile",
        "variants",
        "epochs",
        "batches",
        "batch_size",
        "seq_len",
        "seed",
        "data",
        "power",
        "out",
        "sample_period_ms",
        "inference_reps",
        "n_layers",
        "d_model",
        "n_heads",
        "d_ff",
        "n_kv_heads",
        "window",
        "n_buckets",
        "n_rounds",
        "latent_dim",
        "tile_q",
        "tile_kv",
    ];

    /// Sets one field by name. `profile` (desk or paper) resets everything
    /// else, so it should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "profile" => {
                *self = match value.trim() {
                    "desk" => RunSpec::desk(),
                    "paper" => RunSpec::paper(),
                    other => return Err(Error::Config(format!("unknown profile `{other}` (desk or paper)"))),
                }
            }
            "variants" => self.variants = parse_variant_list(value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "batches" | "batches_per_epoch" => self.batches_per_epoch = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "seq_len" => self.set_seq_len(parse(k, value)?),
            "seed" => self.seed = parse(k, value)?,
            "data" => self.data = parse(k, value)?,
            "power" => self.power = value.parse()?,
            "out" | "out_dir" => self.out_dir = Some(value.trim().into()),
            "sample_period_ms" => self.sample_period_ms = parse(k, value)?,
            "inference_reps" => self.inference_reps = parse(k, value)?,
            "n_layers" => self.model.n_layers = parse(k, value)?,
            "d_model" => {
                self.model.d_model = parse(k, value)?;
                self.model.attention.head_dim = self.model.d_model / self.model.attention.n_heads.max(1);
            }
            "n_heads" => {
                self.model.n_heads = parse(k, value)?;
                self.model.attention.n_heads = self.model.n_heads;
                self.model.attention.head_dim = self.model.d_model / self.model.attention.n_heads.max(1);
            }
            "d_ff" => self.model.d_ff = parse(k, value)?,
            "n_kv_heads" => self.model.attention.n_kv_heads = parse(k, value)?,
            "window" => self.model.attention.window = parse(k, value)?,
            "n_buckets" => self.model.attention.n_buckets = parse(k, value)?,
            "n_rounds" => self.model.attention.n_rounds = parse(k, value)?,
            "latent_dim" => self.model.attention.latent_dim = parse(k, value)?,
            "tile_q" => self.model.attention.tile_q = parse(k, value)?,
            "tile_kv" => self.model.attention.tile_kv = parse(k, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

/// Reads `path` as a JSON object or as `key = value` lines (`#` starts a
/// comment) and applies each entry in file order.
pub fn apply_config_file(spec: &mut RunSpec, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (key, value) in config_entries(&text, path)? {
        spec.set(&key, &value)?;
    }
    Ok(())
}

fn config_entries(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)?;
        let mut entries: Vec<(String, String)> = map
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect();
        // A profile resets the spec, so it must be applied before anything else.
        entries.sort_by_key(|(k, _)| k != "profile");
        return Ok(entries);
    }
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}
