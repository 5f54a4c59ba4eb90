//! Demonstrations: data model, scripted expert, file format, store and replay
//! validation.

mod expert;
pub mod format;
mod store;

pub use expert::{scripted_expert, ExpertController, ExpertPlan};
pub use store::{DemoStore, Manifest, ManifestEntry};

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, Outcome};
use crate::error::{Error, Result};
use crate::eye::{Fidelity, SectorId};
use crate::render::{ObsConfig, Observation};
use crate::tool::ActionDelta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemoSource {
    Scripted,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub surgeon: String,
    pub target: SectorId,
    pub fidelity: Fidelity,
    /// Observation layout the frames were rendered with.
    pub obs: ObsConfig,
    pub obs_hash: String,
    pub env_hash: String,
    /// Environment reset seed; replaying the actions from it reproduces the episode.
    pub seed: u64,
    pub source: DemoSource,
    pub outcome: Outcome,
    pub entry_sector: Option<SectorId>,
}

/// One recorded step: the observation the action was chosen from, the action
/// and the reward it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: u32,
    /// The three frames' bytes, concatenated in rig order.
    pub frames: Vec<u8>,
    pub tool_state: [f64; 7],
    pub distance: f64,
    pub action: ActionDelta,
    pub r_env: Option<f64>,
}

impl TrajectoryStep {
    pub fn from_observation(t: u32, obs: &Observation, action: ActionDelta, r_env: Option<f64>) -> Self {
        let mut frames = Vec::with_capacity(obs.frames.iter().map(|f| f.data.len()).sum());
        for f in &obs.frames {
            frames.extend_from_slice(&f.data);
        }
        Self { t, frames, tool_state: obs.tool_state, distance: obs.distance, action, r_env }
    }

    /// Flattened observation, identical to [`Observation::flatten`].
    pub fn observation(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.frames.iter().map(|&b| b as f64 / 255.0).collect();
        v.extend_from_slice(&self.tool_state);
        v.push(self.distance);
        v
    }

    pub fn obs_len(&self) -> usize {
        self.frames.len() + 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub meta: DemoMeta,
    pub steps: Vec<TrajectoryStep>,
}

impl Demonstration {
    pub fn validate_shape(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Contract("demonstration has no steps".into()));
        }
        let want = self.meta.obs.frame_len() * 3;
        for s in &self.steps {
            if s.frames.len() != want {
                return Err(Error::Shape(format!(
                    "step {} has {} frame bytes, observation config needs {want}",
                    s.t,
                    s.frames.len()
                )));
            }
        }
        Ok(())
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionDelta> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// Fails with [`Error::ConfigMismatch`] unless recorded with `obs_hash`.
    pub fn check_compatible(&self, obs_hash: &str) -> Result<()> {
        if self.meta.obs_hash != obs_hash {
            return Err(Error::ConfigMismatch { expected: obs_hash.into(), found: self.meta.obs_hash.clone() });
        }
        Ok(())
    }
}

/// Runs `controller` from `seed` until the episode ends, recording every step.
pub fn record_episode(
    env: &mut Env,
    seed: u64,
    mut controller: impl FnMut(&Env) -> Result<ActionDelta>,
) -> Result<(Vec<TrajectoryStep>, Outcome, Option<SectorId>)> {
    let mut obs = env.reset(seed)?;
    let mut steps = Vec::new();
    let mut t = 0u32;
    loop {
        let action = controller(env)?;
        let r = env.step(&action)?;
        steps.push(TrajectoryStep::from_observation(t, &obs, action, Some(r.r_env)));
        t += 1;
        obs = r.observation;
        if r.terminal {
            let outcome = env.state().outcome.expect("terminal episode has an outcome");
            return Ok((steps, outcome, env.state().entry_sector));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub outcome: Option<Outcome>,
    pub entry_sector: Option<SectorId>,
    /// Steps replayed before the episode ended (or all of them).
    pub steps: usize,
    pub rewards: Vec<f64>,
    pub valid: bool,
    pub issues: Vec<String>,
}

/// Replays a demonstration's actions in a fresh environment under `config`.
/// Valid demos succeed and enter through their target sector.
pub fn validate_demo(config: &EnvConfig, demo: &Demonstration) -> Result<ValidationReport> {
    let mut env = Env::new(config.clone())?;
    validate_demo_in(&mut env, demo)
}

/// As [`validate_demo`], reusing an existing environment.
pub fn validate_demo_in(env: &mut Env, demo: &Demonstration) -> Result<ValidationReport> {
    let mut issues = Vec::new();
    if demo.meta.fidelity != env.config().fidelity() {
        issues.push(format!(
            "demo fidelity {:?} differs from environment {:?}",
            demo.meta.fidelity,
            env.config().fidelity()
        ));
    }
    if demo.steps.is_empty() {
        issues.push("no steps".into());
    }
    env.reset(demo.meta.seed)?;
    let mut rewards = Vec::new();
    let mut last = None;
    for a in demo.actions() {
        let r = env.step(&a)?;
        rewards.push(r.r_env);
        last = Some(r.event);
        if r.terminal {
            break;
        }
    }
    let outcome = env.state().outcome;
    let entry_sector = env.state().entry_sector;
    match outcome {
        Some(Outcome::Success) => {}
        Some(o) => issues.push(format!("episode ended {o:?}")),
        None => issues.push(format!("actions ran out before the episode ended (last event {last:?})")),
    }
    if entry_sector != Some(demo.meta.target) {
        issues.push(format!("entry sector {entry_sector:?} differs from target {}", demo.meta.target));
    }
    Ok(ValidationReport { outcome, entry_sector, steps: rewards.len(), rewards, valid: issues.is_empty(), issues })
}
