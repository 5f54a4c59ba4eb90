//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid by
//! `--set key.path=value` flags, then fully resolved before anything runs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use keratome_core::env::EnvConfig;
use keratome_core::eval::Denominator;
use keratome_core::eye::Fidelity;
use keratome_core::hash::config_hash;
use keratome_core::learn::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Low-poly steps before the high-poly stage.
    pub pretrain: u64,
    pub fine_tune: u64,
    /// Steps for single-stage runs.
    pub direct: u64,
    pub adapt: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { pretrain: 50_000, fine_tune: 25_000, direct: 75_000, adapt: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub stochastic: bool,
    pub denominator: Denominator,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 200, seeds: vec![0, 1, 2, 3, 4], stochastic: false, denominator: Denominator::AllEpisodes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeSettings {
    pub tick_hz: f64,
    /// Reset seed of the first episode; later episodes count up from it.
    pub first_seed: u64,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self { tick_hz: 20.0, first_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub low: EnvConfig,
    pub high: EnvConfig,
    pub train: TrainConfig,
    pub budgets: Budgets,
    pub eval: EvalSettings,
    pub serve: ServeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            low: EnvConfig::low_poly(),
            high: EnvConfig::high_poly(),
            train: TrainConfig::default(),
            budgets: Budgets::default(),
            eval: EvalSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key.path=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let user: Value = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            merge(&mut root, user, "")?;
        }
        for o in overrides {
            let (key, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
            let value = parse_scalar(raw.trim());
            let mut patch = value;
            for part in key.trim().rsplit('.') {
                let mut t = toml::map::Map::new();
                t.insert(part.to_string(), patch);
                patch = Value::Table(t);
            }
            merge(&mut root, patch, "").with_context(|| format!("applying override {o:?}"))?;
        }
        let cfg: RunConfig = root.try_into().context("resolving configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.low.validate()?;
        self.high.validate()?;
        self.train.validate()?;
        if self.low.fidelity() != Fidelity::LowPoly || self.high.fidelity() != Fidelity::HighPoly {
            bail!("[low] and [high] must describe low-poly and high-poly eyes");
        }
        if self.eval.episodes == 0 || self.eval.seeds.is_empty() {
            bail!("eval needs at least one episode and one seed");
        }
        if !(self.serve.tick_hz > 0.0 && self.serve.tick_hz <= 1000.0) {
            bail!("serve.tick_hz must be in (0, 1000]");
        }
        Ok(())
    }

    pub fn env(&self, f: Fidelity) -> &EnvConfig {
        match f {
            Fidelity::LowPoly => &self.low,
            Fidelity::HighPoly => &self.high,
        }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(self)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Integers, floats, booleans and arrays parse as TOML; anything else is a string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::map::Map<String, Value>>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut m| m.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Overlays `patch` on `base`. Keys absent from `base` are rejected so typos
/// fail loudly; integers are accepted where floats are expected.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Table(b), Value::Table(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => bail!("unknown configuration key {sub:?}"),
                }
            }
        }
        (b @ Value::Float(_), Value::Integer(i)) => *b = Value::Float(i as f64),
        (b, p) => {
            if std::mem::discriminant(b) != std::mem::discriminant(&p) {
                bail!("configuration key {path:?} expects {}, got {}", b.type_str(), p.type_str());
            }
            *b = p;
        }
    }
    Ok(())
}
