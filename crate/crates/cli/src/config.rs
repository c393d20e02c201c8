//! Training configuration from a `key = value` file plus flag overrides.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use featebm::energy_net::Activation;
use featebm::sgld::InitMode;
use featebm::trainer::TrainConfig;

/// Keys accepted in config files and as train flags.
pub const KEYS: &[&str] = &[
    "preset",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "l2",
    "input_noise",
    "sgld_steps",
    "sgld_step_start",
    "sgld_step_end",
    "sgld_noise_start",
    "sgld_noise_end",
    "sgld_clip",
    "hidden_width",
    "hidden_layers",
    "activation",
    "net_temperature",
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            bail!("{origin}:{}: unknown key `{key}`", i + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_kv(&text, &path.display().to_string())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("config key `{key}`: cannot parse `{v}`"))
}

/// Starts from the named preset and applies every other key on top.
pub fn build(values: &BTreeMap<String, String>, ebm: bool, seed: u64) -> Result<TrainConfig> {
    let preset = values.get("preset").map(String::as_str).unwrap_or("toy");
    let mut cfg = match (preset, ebm) {
        ("toy", false) => TrainConfig::toy_correction(),
        ("toy", true) => TrainConfig::toy_ebm(),
        ("full", false) => TrainConfig::full_correction(),
        ("full", true) => TrainConfig::full_ebm(),
        (p, _) => bail!("unknown preset `{p}` (expected toy or full)"),
    };
    cfg.seed = seed;
    cfg.init_mode = if ebm { InitMode::StandardNormal } else { InitMode::Mog };
    for (k, v) in values {
        match k.as_str() {
            "preset" => {}
            "epochs" => cfg.epochs = num(k, v)?,
            "batch_size" => cfg.batch_size = num(k, v)?,
            "lr" => cfg.adam.lr = num(k, v)?,
            "beta1" => cfg.adam.beta1 = num(k, v)?,
            "beta2" => cfg.adam.beta2 = num(k, v)?,
            "adam_eps" => cfg.adam.eps = num(k, v)?,
            "l2" => cfg.l2_coeff = num(k, v)?,
            "input_noise" => cfg.input_noise_std = num(k, v)?,
            "sgld_steps" => cfg.sgld.steps = num(k, v)?,
            "sgld_step_start" => cfg.sgld.step_size.0 = num(k, v)?,
            "sgld_step_end" => cfg.sgld.step_size.1 = num(k, v)?,
            "sgld_noise_start" => cfg.sgld.noise_scale.0 = num(k, v)?,
            "sgld_noise_end" => cfg.sgld.noise_scale.1 = num(k, v)?,
            "sgld_clip" => cfg.sgld.grad_clip = Some(num(k, v)?),
            "hidden_width" => cfg.hidden_width = num(k, v)?,
            "hidden_layers" => cfg.hidden_layers = num(k, v)?,
            "activation" => cfg.activation = v.parse::<Activation>()?,
            "net_temperature" => cfg.net_temperature = num(k, v)?,
            other => bail!("unknown config key `{other}`"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every resolved setting, for the run manifest.
pub fn describe(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("epochs", cfg.epochs.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("lr", cfg.adam.lr.to_string());
    put("beta1", cfg.adam.beta1.to_string());
    put("beta2", cfg.adam.beta2.to_string());
    put("adam_eps", cfg.adam.eps.to_string());
    put("l2", cfg.l2_coeff.to_string());
    put("input_noise", cfg.input_noise_std.to_string());
    put("sgld_steps", cfg.sgld.steps.to_string());
    put("sgld_step_start", cfg.sgld.step_size.0.to_string());
    put("sgld_step_end", cfg.sgld.step_size.1.to_string());
    put("sgld_noise_start", cfg.sgld.noise_scale.0.to_string());
    put("sgld_noise_end", cfg.sgld.noise_scale.1.to_string());
    if let Some(c) = cfg.sgld.grad_clip {
        put("sgld_clip", c.to_string());
    }
    put("init_mode", cfg.init_mode.name().to_string());
    put("hidden_width", cfg.hidden_width.to_string());
    put("hidden_layers", cfg.hidden_layers.to_string());
    put("activation", cfg.activation.name().to_string());
    put("net_temperature", cfg.net_temperature.to_string());
    put("seed", cfg.seed.to_string());
    m
}
