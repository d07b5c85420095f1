//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, omitted keys keep their
//! defaults and unknown keys are rejected. [`serialize_config`] writes every
//! key in a fixed order, and parsing its output gives back the same config.

use std::collections::HashMap;
use std::path::Path;

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// All recognized keys, in serialization order. Dataset parameters
/// (`radius`, `mode_std`, `gap`, `comp_std`) are only valid for their dataset.
pub const KEYS: &[&str] = &[
    "variant",
    "dataset",
    "radius",
    "mode_std",
    "gap",
    "comp_std",
    "n_train",
    "n_val",
    "n_test",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "clip_value",
    "k",
    "lambda_aux",
    "lambda_rec",
    "rec_p",
    "batch_d",
    "batch_g",
    "d_steps",
    "g_steps",
    "steps",
    "eval_interval",
    "noise_dim",
    "hidden",
    "activation",
    "pred_batch",
    "pred_max_epochs",
    "patience",
    "eval_k",
    "eval_grid",
    "eval_samples",
    "capture_share",
    "record_wall_time",
];

/// Keys whose values are plain numbers and can be swept.
pub fn is_sweepable(key: &str) -> bool {
    !matches!(
        key,
        "variant" | "dataset" | "hidden" | "activation" | "record_wall_time" | "clip_value"
    ) && KEYS.contains(&key)
}

fn num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as a number"))
}

fn float(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{value}` is not finite"))
    }
}

/// Sets one key on `cfg`. `dataset` replaces the dataset with its defaults,
/// so it must be applied before the dataset's parameters.
pub fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let value = value.trim();
    match key {
        "variant" => cfg.variant = value.parse()?,
        "dataset" => cfg.dataset = DatasetKind::from_name(value).map_err(|e| e.to_string())?,
        "radius" | "mode_std" => match &mut cfg.dataset {
            DatasetKind::Ring8 { radius, mode_std } => {
                *(if key == "radius" { radius } else { mode_std }) = float(value)?
            }
            other => return Err(format!("does not apply to dataset {}", other.name())),
        },
        "gap" | "comp_std" => match &mut cfg.dataset {
            DatasetKind::CondBimodal { gap, comp_std } => {
                *(if key == "gap" { gap } else { comp_std }) = float(value)?
            }
            other => return Err(format!("does not apply to dataset {}", other.name())),
        },
        "n_train" => cfg.n_train = num(value)?,
        "n_val" => cfg.n_val = num(value)?,
        "n_test" => cfg.n_test = num(value)?,
        "seed" => cfg.seed = num(value)?,
        "lr" => cfg.optim.lr = float(value)?,
        "beta1" => cfg.optim.beta1 = float(value)?,
        "beta2" => cfg.optim.beta2 = float(value)?,
        "eps" => cfg.optim.eps = float(value)?,
        "weight_decay" => cfg.optim.weight_decay = float(value)?,
        "clip_value" => {
            cfg.optim.clip_value = match value {
                "none" => None,
                v => Some(float(v)?),
            }
        }
        "k" => cfg.k = num(value)?,
        "lambda_aux" => {
            cfg.lambda_aux = match value {
                "auto" => None,
                v => Some(float(v)?),
            }
        }
        "lambda_rec" => cfg.lambda_rec = float(value)?,
        "rec_p" => cfg.rec_p = num(value)?,
        "batch_d" => cfg.batch_d = num(value)?,
        "batch_g" => cfg.batch_g = num(value)?,
        "d_steps" => cfg.d_steps = num(value)?,
        "g_steps" => cfg.g_steps = num(value)?,
        "steps" => cfg.steps = num(value)?,
        "eval_interval" => cfg.eval_interval = num(value)?,
        "noise_dim" => cfg.noise_dim = num(value)?,
        "hidden" => {
            cfg.hidden = value
                .split(',')
                .map(|w| num(w.trim()))
                .collect::<std::result::Result<_, _>>()?
        }
        "activation" => cfg.activation = value.parse()?,
        "pred_batch" => cfg.pred_batch = num(value)?,
        "pred_max_epochs" => cfg.pred_max_epochs = num(value)?,
        "patience" => cfg.patience = num(value)?,
        "eval_k" => cfg.eval_k = num(value)?,
        "eval_grid" => cfg.eval_grid = num(value)?,
        "eval_samples" => cfg.eval_samples = num(value)?,
        "capture_share" => cfg.capture_share = float(value)?,
        "record_wall_time" => {
            cfg.record_wall_time = match value {
                "true" => true,
                "false" => false,
                v => return Err(format!("expected true or false, got `{v}`")),
            }
        }
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Parses configuration text; errors name the key and the 1-based line.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                line,
                key: content.to_string(),
                msg: "expected `key = value`".into(),
            });
        };
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                line,
                key,
                msg: "unknown key".into(),
            });
        }
        if let Some(first) = seen.insert(key.clone(), line) {
            return Err(Error::Parse {
                line,
                key,
                msg: format!("already set on line {first}"),
            });
        }
        entries.push((line, key, value.trim().to_string()));
    }
    // the dataset choice resets dataset parameters, so it goes first
    entries.sort_by_key(|(_, k, _)| k != "dataset");
    let mut cfg = TrainConfig::default();
    for (line, key, value) in &entries {
        set_key(&mut cfg, key, value).map_err(|msg| Error::Parse {
            line: *line,
            key: key.clone(),
            msg,
        })?;
    }
    cfg.check().map_err(|(key, msg)| Error::Parse {
        line: seen.get(key).copied().unwrap_or(0),
        key: key.to_string(),
        msg,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Every key with its current value, in [`KEYS`] order.
pub fn config_entries(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let f = |v: f64| format!("{v:?}");
    let mut out: Vec<(&'static str, String)> = vec![
        ("variant", cfg.variant.to_string()),
        ("dataset", cfg.dataset.name().to_string()),
    ];
    match cfg.dataset {
        DatasetKind::Ring8 { radius, mode_std } => {
            out.push(("radius", f(radius)));
            out.push(("mode_std", f(mode_std)));
        }
        DatasetKind::CondBimodal { gap, comp_std } => {
            out.push(("gap", f(gap)));
            out.push(("comp_std", f(comp_std)));
        }
        DatasetKind::TwoDelta | DatasetKind::HeteroGaussian => {}
    }
    let o = &cfg.optim;
    out.extend([
        ("n_train", cfg.n_train.to_string()),
        ("n_val", cfg.n_val.to_string()),
        ("n_test", cfg.n_test.to_string()),
        ("seed", cfg.seed.to_string()),
        ("lr", f(o.lr)),
        ("beta1", f(o.beta1)),
        ("beta2", f(o.beta2)),
        ("eps", f(o.eps)),
        ("weight_decay", f(o.weight_decay)),
        ("clip_value", o.clip_value.map_or("none".into(), f)),
        ("k", cfg.k.to_string()),
        ("lambda_aux", cfg.lambda_aux.map_or("auto".into(), f)),
        ("lambda_rec", f(cfg.lambda_rec)),
        ("rec_p", cfg.rec_p.to_string()),
        ("batch_d", cfg.batch_d.to_string()),
        ("batch_g", cfg.batch_g.to_string()),
        ("d_steps", cfg.d_steps.to_string()),
        ("g_steps", cfg.g_steps.to_string()),
        ("steps", cfg.steps.to_string()),
        ("eval_interval", cfg.eval_interval.to_string()),
        ("noise_dim", cfg.noise_dim.to_string()),
        (
            "hidden",
            cfg.hidden
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("activation", cfg.activation.to_string()),
        ("pred_batch", cfg.pred_batch.to_string()),
        ("pred_max_epochs", cfg.pred_max_epochs.to_string()),
        ("patience", cfg.patience.to_string()),
        ("eval_k", cfg.eval_k.to_string()),
        ("eval_grid", cfg.eval_grid.to_string()),
        ("eval_samples", cfg.eval_samples.to_string()),
        ("capture_share", f(cfg.capture_share)),
        ("record_wall_time", cfg.record_wall_time.to_string()),
    ]);
    out
}

pub fn serialize_config(cfg: &TrainConfig) -> String {
    config_entries(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
