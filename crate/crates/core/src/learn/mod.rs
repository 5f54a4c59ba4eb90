//! Learning: networks, PPO, the GAIL discriminator, reward mixing and the
//! curriculum/adaptation trainers.

pub mod adam;
pub mod checkpoint;
pub mod gail;
pub mod mlp;
pub mod normalizer;
pub mod policy;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointMeta, Counters, DiscBundle};
pub use gail::{gail_reward, DiscInput, DiscStats, Discriminator, GailRewardForm};
pub use policy::{ActorCritic, PolicyArch, PpoConfig, PpoStats};
pub use trainer::{
    expert_data, fine_tune_adapted, to_action_delta, train_curriculum, train_single, CurveRow, ExpertData, PolicyBundle,
    Trainer,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use gail::DiscUpdateConfig;

/// Strength factors weighting imitation and environment rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub lambda_gail: f64,
    pub lambda_env: f64,
}

impl MixConfig {
    pub fn new(lambda_gail: f64, lambda_env: f64) -> Result<Self> {
        let m = Self { lambda_gail, lambda_env };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gail >= 0.0 && self.lambda_env >= 0.0 && self.lambda_gail.is_finite() && self.lambda_env.is_finite()) {
            return Err(Error::InvalidConfig(format!("strength factors must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

pub fn mix_rewards(r_gail: f64, r_env: f64, mix: &MixConfig) -> f64 {
    r_gail * mix.lambda_gail + r_env * mix.lambda_env
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    NonAdapt,
    BalancedAdapt,
    HighAdapt,
    PurelyAdapt,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::NonAdapt, Preset::BalancedAdapt, Preset::HighAdapt, Preset::PurelyAdapt];

    pub fn mix(self) -> MixConfig {
        let (g, e) = match self {
            Preset::NonAdapt => (0.0, 1.0),
            Preset::BalancedAdapt => (0.5, 0.5),
            Preset::HighAdapt => (0.7, 0.3),
            Preset::PurelyAdapt => (1.0, 0.0),
        };
        MixConfig { lambda_gail: g, lambda_env: e }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::NonAdapt => "NonAdapt",
            Preset::BalancedAdapt => "BalancedAdapt",
            Preset::HighAdapt => "HighAdapt",
            Preset::PurelyAdapt => "PurelyAdapt",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase().replace(['-', '_'], "");
        let k = k.strip_suffix("agent").unwrap_or(&k);
        Preset::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == k)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?} (NonAdapt, BalancedAdapt, HighAdapt, PurelyAdapt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GailConfig {
    pub input: DiscInput,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub update: DiscUpdateConfig,
    pub reward: GailRewardForm,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            input: DiscInput::Full,
            hidden: vec![128, 64],
            lr: 3e-4,
            update: DiscUpdateConfig::default(),
            reward: GailRewardForm::LogSurrogate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Normalized observations are clipped to `±obs_clip`.
    pub obs_clip: f64,
    /// Multiplier for mean-centered pixel entries.
    pub pixel_scale: f64,
    pub gail: GailConfig,
    /// Episodes in the moving window behind the curve's success rate.
    pub scr_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            hidden: vec![256, 128],
            init_log_std: -0.7,
            obs_clip: 5.0,
            pixel_scale: 2.0,
            gail: GailConfig::default(),
            scr_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.arch(1).validate()?;
        if !(self.obs_clip > 0.0) || !(self.pixel_scale > 0.0) || self.scr_window == 0 || !(self.gail.lr > 0.0) || self.gail.update.epochs == 0 {
            return Err(Error::InvalidConfig(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn arch(&self, obs_dim: usize) -> PolicyArch {
        PolicyArch { obs_dim, hidden: self.hidden.clone(), init_log_std: self.init_log_std }
    }
}
