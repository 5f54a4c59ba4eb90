//! Evaluation episodes, completion and adaptation rates, and reports.

mod report;

pub use report::{
    read_trade_off_csv, trade_off_csv, trade_off_rows, EvalReport, ReferenceValue, ReportTable, TargetRate, TradeOffRow,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::ExpertController;
use crate::env::{Env, EnvConfig, Outcome};
use crate::error::{Error, Result};
use crate::eye::{SectorId, SectorTarget};
use crate::learn::{to_action_delta, Checkpoint, PolicyBundle};
use crate::render::Observation;
use crate::tool::ActionDelta;

/// Chooses actions during evaluation.
pub trait Controller {
    /// Called after each reset, before the first action.
    fn begin(&mut self, env: &Env, episode_seed: u64) -> Result<()>;
    fn act(&mut self, env: &Env, obs: &Observation) -> Result<ActionDelta>;
}

/// A trained policy; mean actions unless `stochastic`.
pub struct PolicyController<'a> {
    bundle: &'a PolicyBundle,
    stochastic: bool,
    rng: ChaCha8Rng,
}

impl<'a> PolicyController<'a> {
    pub fn new(bundle: &'a PolicyBundle, stochastic: bool) -> Self {
        Self { bundle, stochastic, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Controller for PolicyController<'_> {
    fn begin(&mut self, _env: &Env, episode_seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0xE7A1_u64);
        Ok(())
    }

    fn act(&mut self, env: &Env, obs: &Observation) -> Result<ActionDelta> {
        let cfg = env.config();
        let a = self.bundle.act(&obs.flatten(), &cfg.axis_mask, !self.stochastic, &mut self.rng)?;
        Ok(to_action_delta(&a, &cfg.bounds, &cfg.axis_mask))
    }
}

/// The scripted expert for a fixed target sector, replanned every episode.
pub struct ExpertPolicy {
    target: SectorId,
    ctl: Option<ExpertController>,
}

impl ExpertPolicy {
    pub fn new(target: SectorId) -> Self {
        Self { target, ctl: None }
    }
}

impl Controller for ExpertPolicy {
    fn begin(&mut self, _env: &Env, episode_seed: u64) -> Result<()> {
        self.ctl = Some(ExpertController::new(self.target, episode_seed));
        Ok(())
    }

    fn act(&mut self, env: &Env, _obs: &Observation) -> Result<ActionDelta> {
        self.ctl.as_mut().ok_or_else(|| Error::Contract("act before begin".into()))?.act(env)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    /// Evaluation seed the episode belongs to.
    pub seed: u64,
    pub episode_seed: u64,
    pub outcome: Outcome,
    pub entry_sector: Option<SectorId>,
    pub steps: u32,
    pub env_return: f64,
}

/// Reset seeds for the episodes of one evaluation seed.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Runs `n` episodes for each seed; no learning happens.
pub fn run_eval(controller: &mut dyn Controller, env: &mut Env, n: usize, seeds: &[u64]) -> Result<Vec<EpisodeOutcome>> {
    if n == 0 || seeds.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs n >= 1 and at least one seed".into()));
    }
    let mut out = Vec::with_capacity(n * seeds.len());
    for &seed in seeds {
        for es in episode_seeds(seed, n) {
            let mut obs = env.reset(es)?;
            controller.begin(env, es)?;
            let mut ret = 0.0;
            loop {
                let a = controller.act(env, &obs)?;
                let r = env.step(&a)?;
                ret += r.r_env;
                obs = r.observation;
                if r.terminal {
                    break;
                }
            }
            let st = env.state();
            out.push(EpisodeOutcome {
                seed,
                episode_seed: es,
                outcome: st.outcome.expect("terminal episode has an outcome"),
                entry_sector: st.entry_sector,
                steps: st.t,
                env_return: ret,
            });
        }
    }
    Ok(out)
}

/// Evaluates a checkpoint's policy, refusing observation layouts it was not trained on.
pub fn eval_checkpoint(
    ckpt: &Checkpoint,
    env_cfg: &EnvConfig,
    n: usize,
    seeds: &[u64],
    stochastic: bool,
) -> Result<Vec<EpisodeOutcome>> {
    let obs_hash = env_cfg.obs_hash()?;
    if ckpt.meta.obs_hash != obs_hash {
        return Err(Error::ConfigMismatch { expected: obs_hash, found: ckpt.meta.obs_hash.clone() });
    }
    let mut env = Env::new(env_cfg.clone())?;
    let mut ctl = PolicyController::new(&ckpt.bundle, stochastic);
    run_eval(&mut ctl, &mut env, n, seeds)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// All evaluated episodes, so AdSSR never exceeds SCR.
    #[default]
    AllEpisodes,
    /// Successful episodes only.
    Successes,
}

/// Mean and standard error across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub mean: f64,
    pub std_err: f64,
}

impl Rate {
    /// Mean of per-seed values; std_err is the sample standard deviation over √n.
    pub fn from_per_seed(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, std_err }
    }
}

/// Fraction of episodes that succeeded.
pub fn scr(outcomes: &[EpisodeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.outcome == Outcome::Success).count() as f64 / outcomes.len() as f64
}

/// Distinct seeds in first-appearance order.
fn seeds_of(outcomes: &[EpisodeOutcome]) -> Vec<u64> {
    let mut seeds = Vec::new();
    for o in outcomes {
        if !seeds.contains(&o.seed) {
            seeds.push(o.seed);
        }
    }
    seeds.sort_unstable();
    seeds
}

/// SCR per seed, aggregated across seeds.
pub fn scr_rate(outcomes: &[EpisodeOutcome]) -> Rate {
    let per: Vec<f64> = seeds_of(outcomes)
        .into_iter()
        .map(|s| scr(&outcomes.iter().filter(|o| o.seed == s).copied().collect::<Vec<_>>()))
        .collect();
    if per.is_empty() {
        return Rate { mean: 0.0, std_err: 0.0 };
    }
    Rate::from_per_seed(&per)
}

fn adssr_single(outcomes: &[&EpisodeOutcome], target: SectorTarget, den: Denominator) -> f64 {
    let hits = outcomes
        .iter()
        .filter(|o| o.outcome == Outcome::Success && o.entry_sector.is_some_and(|s| target.contains(s)))
        .count() as f64;
    let d = match den {
        Denominator::AllEpisodes => outcomes.len(),
        Denominator::Successes => outcomes.iter().filter(|o| o.outcome == Outcome::Success).count(),
    };
    if d == 0 {
        0.0
    } else {
        hits / d as f64
    }
}

/// Per-seed fraction of episodes that succeeded through `target`.
pub fn adssr_per_seed(outcomes: &[EpisodeOutcome], target: SectorTarget, den: Denominator) -> Vec<f64> {
    seeds_of(outcomes)
        .into_iter()
        .map(|s| adssr_single(&outcomes.iter().filter(|o| o.seed == s).collect::<Vec<_>>(), target, den))
        .collect()
}

pub fn adssr(outcomes: &[EpisodeOutcome], target: SectorTarget, den: Denominator) -> Rate {
    let per = adssr_per_seed(outcomes, target, den);
    if per.is_empty() {
        return Rate { mean: 0.0, std_err: 0.0 };
    }
    Rate::from_per_seed(&per)
}
