//! Evaluation reports and their CSV/JSON exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{adssr, scr_rate, Denominator, EpisodeOutcome, Rate};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eye::{Half, SectorTarget};
use crate::learn::{MixConfig, Preset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRate {
    pub target: SectorTarget,
    pub mean: f64,
    pub std_err: f64,
}

/// Reference values reported for full-scale training, kept as annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub metric: String,
    pub value: f64,
}

fn reference_for(preset: Option<Preset>) -> Vec<ReferenceValue> {
    let r = |m: &str, v: f64| ReferenceValue { metric: m.to_string(), value: v };
    match preset {
        Some(Preset::NonAdapt) => vec![r("SCR", 0.994), r("AdSSR(Left)", 0.28), r("AdSSR(Right)", 0.72)],
        Some(Preset::PurelyAdapt) => vec![r("SCR", 0.835)],
        _ => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub preset: Option<Preset>,
    pub mix: Option<MixConfig>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub denominator: Denominator,
    pub scr: Rate,
    /// One entry per table row, in row order.
    pub adssr: Vec<TargetRate>,
    pub env_hash: String,
    pub obs_hash: String,
    pub checkpoint: Option<String>,
    pub reference: Vec<ReferenceValue>,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(
        agent: &str,
        preset: Option<Preset>,
        mix: Option<MixConfig>,
        outcomes: Vec<EpisodeOutcome>,
        denominator: Denominator,
        env_cfg: &EnvConfig,
        checkpoint: Option<String>,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Contract("report needs at least one episode".into()));
        }
        let mut seeds: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let adssr = SectorTarget::ROWS
            .iter()
            .map(|&t| {
                let r = adssr(&outcomes, t, denominator);
                TargetRate { target: t, mean: r.mean, std_err: r.std_err }
            })
            .collect();
        Ok(Self {
            agent: agent.to_string(),
            preset,
            mix: mix.or(preset.map(Preset::mix)),
            episodes: outcomes.len(),
            seeds,
            denominator,
            scr: scr_rate(&outcomes),
            adssr,
            env_hash: env_cfg.hash()?,
            obs_hash: env_cfg.obs_hash()?,
            checkpoint,
            reference: reference_for(preset),
            outcomes,
        })
    }

    pub fn rate(&self, target: SectorTarget) -> Option<Rate> {
        self.adssr.iter().find(|r| r.target == target).map(|r| Rate { mean: r.mean, std_err: r.std_err })
    }

    pub fn left(&self) -> Rate {
        self.rate(SectorTarget::Half(Half::Left)).expect("report has a Left row")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Agents as columns (presets first, in table order), targets as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub reports: Vec<EvalReport>,
}

impl ReportTable {
    pub fn new(mut reports: Vec<EvalReport>) -> Self {
        reports.sort_by_key(|r| (r.preset.map_or(Preset::ALL.len(), |p| p as usize), r.agent.clone()));
        Self { reports }
    }

    pub fn columns(&self) -> Vec<&str> {
        self.reports.iter().map(|r| r.agent.as_str()).collect()
    }

    /// Wide CSV: `metric,<agent>_mean,<agent>_std_err,...`; the first row is
    /// SCR, then one row per target.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["metric".to_string()];
        for r in &self.reports {
            head.push(format!("{}_mean", r.agent));
            head.push(format!("{}_std_err", r.agent));
        }
        w.write_record(&head).map_err(csv_err)?;
        let mut row = vec!["SCR".to_string()];
        for r in &self.reports {
            row.push(format!("{:?}", r.scr.mean));
            row.push(format!("{:?}", r.scr.std_err));
        }
        w.write_record(&row).map_err(csv_err)?;
        for t in SectorTarget::ROWS {
            let mut row = vec![format!("AdSSR({t})")];
            for r in &self.reports {
                let v = r.rate(t).ok_or_else(|| Error::Format(format!("report {} lacks row {t}", r.agent)))?;
                row.push(format!("{:?}", v.mean));
                row.push(format!("{:?}", v.std_err));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Long-format row for SCR-versus-AdSSR plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeOffRow {
    pub agent: String,
    pub lambda_gail: Option<f64>,
    pub lambda_env: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub std_err: f64,
}

pub fn trade_off_rows(table: &ReportTable) -> Vec<TradeOffRow> {
    let mut out = Vec::new();
    for r in &table.reports {
        let row = |metric: String, rate: Rate| TradeOffRow {
            agent: r.agent.clone(),
            lambda_gail: r.mix.map(|m| m.lambda_gail),
            lambda_env: r.mix.map(|m| m.lambda_env),
            metric,
            mean: rate.mean,
            std_err: rate.std_err,
        };
        out.push(row("SCR".into(), r.scr));
        for t in &r.adssr {
            out.push(row(format!("AdSSR({})", t.target), Rate { mean: t.mean, std_err: t.std_err }));
        }
    }
    out
}

pub fn trade_off_csv(rows: &[TradeOffRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_trade_off_csv(s: &str) -> Result<Vec<TradeOffRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}
