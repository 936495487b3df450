//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to the default; unknown or repeated keys are errors. Lists
//! are comma-separated. Floats are written in shortest round-trip form, so
//! `parse(render(c)) == c` exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use patchmoe::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(line: usize, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| bad(line, format!("invalid value {v:?} for {key}")))
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("{key} expects true or false, got {v:?}"))),
    }
}

fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').map(|s| num(line, key, s.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every recognized key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed", "epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps", "lr_milestones", "lr_decay_factor",
    "lambda_etf", "lambda_bal", "gamma", "image_size", "patch_size", "dim", "n_levels", "experts", "top_k", "rank",
    "alpha", "dropout", "use_scaling", "orthogonal_init", "lambda_moe", "scales", "tau", "eps", "head_width",
    "router_init_std", "noise_std", "anomaly_rate", "freq_lo", "freq_hi", "anomaly_freq_lo", "anomaly_freq_hi",
    "max_freq", "anomaly_contrast_lo", "anomaly_contrast_hi", "area_lo", "area_hi", "n_train", "n_eval", "n_seen",
    "n_unseen",
];

fn set(c: &mut TrainConfig, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
    match key {
        "seed" => c.seed = num(line, key, v)?,
        "epochs" => c.epochs = num(line, key, v)?,
        "batch_size" => c.batch_size = num(line, key, v)?,
        "lr" => c.lr = num(line, key, v)?,
        "beta1" => c.beta1 = num(line, key, v)?,
        "beta2" => c.beta2 = num(line, key, v)?,
        "adam_eps" => c.adam_eps = num(line, key, v)?,
        "lr_milestones" => c.lr_milestones = if v.is_empty() { Vec::new() } else { list(line, key, v)? },
        "lr_decay_factor" => c.lr_decay_factor = num(line, key, v)?,
        "lambda_etf" => c.loss.lambda_etf = num(line, key, v)?,
        "lambda_bal" => c.loss.lambda_bal = num(line, key, v)?,
        "gamma" => c.loss.gamma = num(line, key, v)?,
        "image_size" => {
            c.arch.image_size = num(line, key, v)?;
            c.data.image_size = c.arch.image_size;
        }
        "patch_size" => {
            c.arch.patch_size = num(line, key, v)?;
            c.data.patch_size = c.arch.patch_size;
        }
        "dim" => c.arch.dim = num(line, key, v)?,
        "n_levels" => c.arch.n_levels = num(line, key, v)?,
        "experts" => c.arch.experts = num(line, key, v)?,
        "top_k" => c.arch.top_k = num(line, key, v)?,
        "rank" => c.arch.rank = num(line, key, v)?,
        "alpha" => c.arch.alpha = num(line, key, v)?,
        "dropout" => c.arch.dropout = num(line, key, v)?,
        "use_scaling" => c.arch.use_scaling = flag(line, key, v)?,
        "orthogonal_init" => c.arch.orthogonal_init = flag(line, key, v)?,
        "lambda_moe" => c.arch.lambda_moe = num(line, key, v)?,
        "scales" => c.arch.scales = list(line, key, v)?,
        "tau" => c.arch.tau = num(line, key, v)?,
        "eps" => c.arch.eps = num(line, key, v)?,
        "head_width" => c.arch.head_width = num(line, key, v)?,
        "router_init_std" => c.arch.router_init_std = num(line, key, v)?,
        "noise_std" => c.data.noise_std = num(line, key, v)?,
        "anomaly_rate" => c.data.anomaly_rate = num(line, key, v)?,
        "freq_lo" => c.data.freq_band.0 = num(line, key, v)?,
        "freq_hi" => c.data.freq_band.1 = num(line, key, v)?,
        "anomaly_freq_lo" => c.data.anomaly_freq_mult.0 = num(line, key, v)?,
        "anomaly_freq_hi" => c.data.anomaly_freq_mult.1 = num(line, key, v)?,
        "max_freq" => c.data.max_freq = num(line, key, v)?,
        "anomaly_contrast_lo" => c.data.anomaly_contrast.0 = num(line, key, v)?,
        "anomaly_contrast_hi" => c.data.anomaly_contrast.1 = num(line, key, v)?,
        "area_lo" => c.data.area_frac.0 = num(line, key, v)?,
        "area_hi" => c.data.area_frac.1 = num(line, key, v)?,
        "n_train" => c.n_train = num(line, key, v)?,
        "n_eval" => c.n_eval = num(line, key, v)?,
        "n_seen" => c.n_seen = num(line, key, v)?,
        "n_unseen" => c.n_unseen = num(line, key, v)?,
        _ => return Err(bad(line, format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(bad(line, format!("duplicate key {key:?}")));
        }
        set(&mut cfg, line, key, value.trim())?;
    }
    cfg.validate().map_err(|e| ConfigError(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

/// Renders every key of `c`.
pub fn render_config(c: &TrainConfig) -> String {
    let a = &c.arch;
    let d = &c.data;
    let values: Vec<String> = vec![
        c.seed.to_string(),
        c.epochs.to_string(),
        c.batch_size.to_string(),
        c.lr.to_string(),
        c.beta1.to_string(),
        c.beta2.to_string(),
        c.adam_eps.to_string(),
        join(&c.lr_milestones),
        c.lr_decay_factor.to_string(),
        c.loss.lambda_etf.to_string(),
        c.loss.lambda_bal.to_string(),
        c.loss.gamma.to_string(),
        a.image_size.to_string(),
        a.patch_size.to_string(),
        a.dim.to_string(),
        a.n_levels.to_string(),
        a.experts.to_string(),
        a.top_k.to_string(),
        a.rank.to_string(),
        a.alpha.to_string(),
        a.dropout.to_string(),
        a.use_scaling.to_string(),
        a.orthogonal_init.to_string(),
        a.lambda_moe.to_string(),
        join(&a.scales),
        a.tau.to_string(),
        a.eps.to_string(),
        a.head_width.to_string(),
        a.router_init_std.to_string(),
        d.noise_std.to_string(),
        d.anomaly_rate.to_string(),
        d.freq_band.0.to_string(),
        d.freq_band.1.to_string(),
        d.anomaly_freq_mult.0.to_string(),
        d.anomaly_freq_mult.1.to_string(),
        d.max_freq.to_string(),
        d.anomaly_contrast.0.to_string(),
        d.anomaly_contrast.1.to_string(),
        d.area_frac.0.to_string(),
        d.area_frac.1.to_string(),
        c.n_train.to_string(),
        c.n_eval.to_string(),
        c.n_seen.to_string(),
        c.n_unseen.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
