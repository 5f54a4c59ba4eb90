//! Rollout collection, the PPO/GAIL training loop, and the curriculum and
//! adaptation drivers built on it.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointMeta, Counters, DiscBundle};
use super::gail::{discriminator_update, gail_reward, Discriminator};
use super::normalizer::RunningNorm;
use super::policy::{compute_gae, ppo_update, ActorCritic, PpoBatch, ACTION_DIM};
use super::{mix_rewards, MixConfig, Preset, TrainConfig};
use crate::demo::Demonstration;
use crate::env::{Env, EnvConfig, EyeModel, Outcome};
use crate::error::{Error, Result};
use crate::tool::{ActionBounds, ActionDelta};

const DISC_SEED_SALT: u64 = 0xD15C_5EED;

/// Policy, value and optional discriminator with their optimizer state and the
/// observation normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBundle {
    pub policy: ActorCritic,
    pub norm: RunningNorm,
    pub opt: Adam,
    pub disc: Option<DiscBundle>,
}

impl PolicyBundle {
    /// `frame_entries` leading observation entries are pixels.
    pub fn new(cfg: &TrainConfig, obs_dim: usize, frame_entries: usize, rng: &mut impl Rng) -> Result<Self> {
        let policy = ActorCritic::new(cfg.arch(obs_dim), rng)?;
        let opt = Adam::new(cfg.ppo.adam(), &policy.slice_sizes());
        Ok(Self { policy, norm: RunningNorm::new(obs_dim, cfg.obs_clip, frame_entries, cfg.pixel_scale), opt, disc: None })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    /// Deterministic (mean) or sampled action in normalized units for one raw observation.
    pub fn act(&self, obs: &[f64], mask: &[bool; ACTION_DIM], deterministic: bool, rng: &mut impl Rng) -> Result<[f64; ACTION_DIM]> {
        let x = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Shape(e.to_string()))?;
        let xn = self.norm.normalize(x)?;
        let out = self.policy.forward(xn.view())?;
        let (a, _) = self.policy.sample(&out, mask, deterministic, rng);
        let mut r = [0.0; ACTION_DIM];
        r.copy_from_slice(a.row(0).as_slice().unwrap());
        Ok(r)
    }
}

/// Physical action for a policy output: clipped to [-1, 1], scaled by the
/// bounds, masked dims zeroed.
pub fn to_action_delta(a: &[f64], bounds: &ActionBounds, mask: &[bool; ACTION_DIM]) -> ActionDelta {
    let lim = bounds.limits();
    let mut v = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        if mask[j] {
            v[j] = a[j].clamp(-1.0, 1.0) * lim[j];
        }
    }
    ActionDelta::from_array(v)
}

/// Expert observation/action pairs; actions in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertData {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
}

impl ExpertData {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn expert_data(demos: &[Demonstration], env_cfg: &EnvConfig) -> Result<ExpertData> {
    if demos.is_empty() {
        return Err(Error::Contract("adaptation needs at least one demonstration".into()));
    }
    let obs_hash = env_cfg.obs_hash()?;
    let lim = env_cfg.bounds.limits();
    let obs_len = env_cfg.obs.obs_len();
    let n: usize = demos.iter().map(|d| d.steps.len()).sum();
    let mut obs = Array2::zeros((n, obs_len));
    let mut actions = Array2::zeros((n, ACTION_DIM));
    let mut row = 0;
    for d in demos {
        d.check_compatible(&obs_hash)?;
        for st in &d.steps {
            let o = st.observation();
            if o.len() != obs_len {
                return Err(Error::Shape(format!("demo observation has {} entries, expected {obs_len}", o.len())));
            }
            obs.row_mut(row).assign(&Array1::from(o));
            let a = st.action.to_array();
            for j in 0..ACTION_DIM {
                if env_cfg.axis_mask[j] {
                    actions[[row, j]] = (a[j] / lim[j]).clamp(-1.0, 1.0);
                }
            }
            row += 1;
        }
    }
    Ok(ExpertData { obs, actions })
}

/// One row of the training curve, written after every update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub episodes: u64,
    pub update: u64,
    /// Mean cumulative environment reward of the episodes in the window.
    pub mean_return: f64,
    /// Success rate over the same window.
    pub scr_window: f64,
    pub mean_r_gail: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub disc_loss: f64,
    pub disc_acc: f64,
}

pub struct Trainer {
    config: TrainConfig,
    env_config: EnvConfig,
    mix: MixConfig,
    pub bundle: PolicyBundle,
    expert: Option<ExpertData>,
    envs: Vec<Env>,
    obs: Vec<Vec<f64>>,
    ep_return: Vec<f64>,
    rng: ChaCha8Rng,
    d_rng: ChaCha8Rng,
    pub counters: Counters,
    recent: VecDeque<(bool, f64)>,
    pub curve: Vec<CurveRow>,
    stage: String,
}

impl Trainer {
    /// A freshly initialized agent trained on the environment reward only.
    pub fn fresh(config: TrainConfig, env_config: EnvConfig, seed: u64, stage: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 3 * env_config.obs.frame_len();
        let bundle = PolicyBundle::new(&config, env_config.obs.obs_len(), frames, &mut rng)?;
        let d_rng = ChaCha8Rng::seed_from_u64(seed ^ DISC_SEED_SALT);
        Self::assemble(config, env_config, Preset::NonAdapt.mix(), bundle, None, rng, d_rng, Counters::default(), stage)
    }

    /// Continues from a checkpoint. With `reseed`, the sampling streams restart
    /// from that seed; otherwise they resume from the checkpoint's state.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        env_config: EnvConfig,
        mix: MixConfig,
        expert: Option<ExpertData>,
        reseed: Option<u64>,
        stage: &str,
    ) -> Result<Self> {
        let config = ckpt.meta.train.clone();
        config.validate()?;
        mix.validate()?;
        let obs_len = env_config.obs.obs_len();
        if ckpt.bundle.obs_dim() != obs_len {
            return Err(Error::Shape(format!(
                "checkpoint policy takes {} observation entries, environment produces {obs_len}",
                ckpt.bundle.obs_dim()
            )));
        }
        let obs_hash = env_config.obs_hash()?;
        if ckpt.meta.obs_hash != obs_hash {
            return Err(Error::ConfigMismatch { expected: obs_hash, found: ckpt.meta.obs_hash.clone() });
        }
        let (rng, d_rng) = match reseed {
            Some(seed) => (ChaCha8Rng::seed_from_u64(seed), ChaCha8Rng::seed_from_u64(seed ^ DISC_SEED_SALT)),
            None => (ckpt.meta.rng()?, ckpt.meta.d_rng()?),
        };
        let mut bundle = ckpt.bundle.clone();
        let mut d_rng = d_rng;
        if expert.is_some() && bundle.disc.is_none() {
            let disc = Discriminator::new(obs_len, config.gail.input, &config.gail.hidden, &mut d_rng)?;
            let opt = Adam::new(
                super::adam::AdamConfig { lr: config.gail.lr, ..Default::default() },
                &disc.net.slices().iter().map(|s| s.len()).collect::<Vec<_>>(),
            );
            bundle.disc = Some(DiscBundle { disc, opt });
        }
        Self::assemble(config, env_config, mix, bundle, expert, rng, d_rng, ckpt.meta.counters, stage)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        env_config: EnvConfig,
        mix: MixConfig,
        bundle: PolicyBundle,
        expert: Option<ExpertData>,
        mut rng: ChaCha8Rng,
        d_rng: ChaCha8Rng,
        counters: Counters,
        stage: &str,
    ) -> Result<Self> {
        env_config.validate()?;
        if let Some(e) = &expert {
            if e.obs.ncols() != bundle.obs_dim() {
                return Err(Error::Shape(format!(
                    "expert observations have {} entries, policy takes {}",
                    e.obs.ncols(),
                    bundle.obs_dim()
                )));
            }
        }
        let model = Arc::new(EyeModel::build(&env_config.eye)?);
        let mut envs = Vec::with_capacity(config.ppo.n_envs);
        let mut obs = Vec::with_capacity(config.ppo.n_envs);
        for _ in 0..config.ppo.n_envs {
            let mut env = Env::with_model(env_config.clone(), Arc::clone(&model))?;
            obs.push(env.reset(rng.gen())?.flatten());
            envs.push(env);
        }
        let n = envs.len();
        Ok(Self {
            config,
            env_config,
            mix,
            bundle,
            expert,
            envs,
            obs,
            ep_return: vec![0.0; n],
            rng,
            d_rng,
            counters,
            recent: VecDeque::new(),
            curve: Vec::new(),
            stage: stage.to_string(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_config
    }

    pub fn mix(&self) -> MixConfig {
        self.mix
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta::new(
                &self.stage,
                &self.config,
                &self.env_config,
                self.mix,
                self.counters,
                &self.rng,
                &self.d_rng,
            )?,
            bundle: self.bundle.clone(),
        })
    }

    /// Trains until at least `budget` further environment steps have been
    /// collected, calling `on_update` after each update.
    pub fn train(&mut self, budget: u64, mut on_update: impl FnMut(&Trainer, &CurveRow) -> Result<()>) -> Result<()> {
        let target = self.counters.steps + budget;
        while self.counters.steps < target {
            let row = self.update()?;
            on_update(self, &row)?;
        }
        Ok(())
    }

    /// One rollout batch followed by a PPO update and, when imitating, a
    /// discriminator update.
    pub fn update(&mut self) -> Result<CurveRow> {
        let horizon = self.config.ppo.horizon;
        let n_envs = self.envs.len();
        let obs_dim = self.bundle.obs_dim();
        let gamma = self.env_config.gamma;
        let mask = self.env_config.axis_mask;
        let bounds = self.env_config.bounds;
        let total = horizon * n_envs;

        // env-major storage: row k * horizon + t
        let mut obs_n = Array2::zeros((total, obs_dim));
        let mut acts = Array2::zeros((total, ACTION_DIM));
        let mut logp = Array1::zeros(total);
        let mut values = Array1::zeros(total);
        let mut r_env = Array1::zeros(total);
        let mut bootstrap = Array1::<f64>::zeros(total);
        let mut dones = vec![false; total];
        let mut finished: Vec<(bool, f64)> = Vec::new();

        for t in 0..horizon {
            let mut x = Array2::zeros((n_envs, obs_dim));
            for (k, o) in self.obs.iter().enumerate() {
                x.row_mut(k).assign(&ArrayView2::from_shape((1, obs_dim), o).unwrap().row(0));
            }
            self.bundle.norm.update(x.view())?;
            let xn = self.bundle.norm.normalize(x.view())?;
            let out = self.bundle.policy.forward(xn.view())?;
            let (a, lp) = self.bundle.policy.sample(&out, &mask, false, &mut self.rng);
            for k in 0..n_envs {
                let row = k * horizon + t;
                obs_n.row_mut(row).assign(&xn.row(k));
                acts.row_mut(row).assign(&a.row(k));
                logp[row] = lp[k];
                values[row] = out.values[k];
                let delta = to_action_delta(a.row(k).as_slice().unwrap(), &bounds, &mask);
                let res = self.envs[k].step(&delta)?;
                r_env[row] = res.r_env;
                self.ep_return[k] += res.r_env;
                if res.terminal {
                    let outcome = self.envs[k].state().outcome;
                    if outcome == Some(Outcome::Timeout) {
                        let last = res.observation.flatten();
                        let xl = ArrayView2::from_shape((1, obs_dim), &last).unwrap();
                        let v = self.bundle.policy.forward(self.bundle.norm.normalize(xl)?.view())?.values[0];
                        bootstrap[row] = gamma * v;
                    }
                    dones[row] = true;
                    finished.push((outcome == Some(Outcome::Success), self.ep_return[k]));
                    self.ep_return[k] = 0.0;
                    self.counters.episodes += 1;
                    let seed = self.rng.gen();
                    self.obs[k] = self.envs[k].reset(seed)?.flatten();
                } else {
                    self.obs[k] = res.observation.flatten();
                }
            }
        }
        self.counters.steps += total as u64;

        let acts_clipped = acts.mapv(|v| v.clamp(-1.0, 1.0));
        let r_gail = match &self.bundle.disc {
            Some(d) if self.expert.is_some() => d
                .disc
                .prob(obs_n.view(), acts_clipped.view())?
                .mapv(|p| gail_reward(p, self.config.gail.reward)),
            _ => Array1::zeros(total),
        };
        let rewards = Array1::from_shape_fn(total, |i| mix_rewards(r_gail[i], r_env[i], &self.mix) + bootstrap[i]);

        let mut last = Array2::zeros((n_envs, obs_dim));
        for (k, o) in self.obs.iter().enumerate() {
            last.row_mut(k).assign(&Array1::from(o.clone()));
        }
        let last_v = self.bundle.policy.forward(self.bundle.norm.normalize(last.view())?.view())?.values;
        let mut adv = Array1::zeros(total);
        let mut ret = Array1::zeros(total);
        for k in 0..n_envs {
            let r = s![k * horizon..(k + 1) * horizon];
            let (a, g) = compute_gae(
                rewards.slice(r),
                values.slice(r),
                &dones[k * horizon..(k + 1) * horizon],
                last_v[k],
                gamma,
                self.config.ppo.gae_lambda,
            );
            adv.slice_mut(r).assign(&a);
            ret.slice_mut(r).assign(&g);
        }
        let batch = PpoBatch { obs: obs_n, actions: acts, logp_old: logp, advantages: adv, returns: ret, mask };
        let stats = ppo_update(&mut self.bundle.policy, &mut self.bundle.opt, &batch, &self.config.ppo, &mut self.rng)?;

        let mut disc_loss = f64::NAN;
        let mut disc_acc = f64::NAN;
        if let (Some(d), Some(e)) = (self.bundle.disc.as_mut(), self.expert.as_ref()) {
            let en = self.bundle.norm.normalize(e.obs.view())?;
            let ef = d.disc.features(en.view(), e.actions.view())?;
            let pf = d.disc.features(batch.obs.view(), acts_clipped.view())?;
            let st = discriminator_update(
                &mut d.disc,
                &mut d.opt,
                ef.view(),
                pf.view(),
                &self.config.gail.update,
                &mut self.d_rng,
            )?;
            disc_loss = st.loss;
            disc_acc = st.balanced_acc;
        }
        self.counters.updates += 1;

        for f in finished {
            self.recent.push_back(f);
            if self.recent.len() > self.config.scr_window {
                self.recent.pop_front();
            }
        }
        let (mean_return, scr_window) = if self.recent.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n = self.recent.len() as f64;
            (
                self.recent.iter().map(|r| r.1).sum::<f64>() / n,
                self.recent.iter().filter(|r| r.0).count() as f64 / n,
            )
        };
        let row = CurveRow {
            step: self.counters.steps,
            episodes: self.counters.episodes,
            update: self.counters.updates,
            mean_return,
            scr_window,
            mean_r_gail: r_gail.mean().unwrap_or(0.0),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            kl: stats.kl,
            clip_frac: stats.clip_frac,
            disc_loss,
            disc_acc,
        };
        self.curve.push(row);
        Ok(row)
    }
}

/// Single-stage training from scratch with the environment reward.
pub fn train_single(
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    budget: u64,
    seed: u64,
    on_update: impl FnMut(&Trainer, &CurveRow) -> Result<()>,
) -> Result<(Checkpoint, Vec<CurveRow>)> {
    let stage = format!("{:?}", env_cfg.fidelity()).to_lowercase();
    let mut tr = Trainer::fresh(cfg.clone(), env_cfg.clone(), seed, &stage)?;
    tr.train(budget, on_update)?;
    Ok((tr.checkpoint()?, tr.curve))
}

/// Stage 1 on `low` with the environment reward, then stage 2 on `high`
/// starting from the stage-1 checkpoint. Returns both stage checkpoints and
/// the concatenated curve.
pub fn train_curriculum(
    low: &EnvConfig,
    high: &EnvConfig,
    cfg: &TrainConfig,
    budgets: (u64, u64),
    seed: u64,
    mut on_update: impl FnMut(&Trainer, &CurveRow) -> Result<()>,
) -> Result<(Vec<Checkpoint>, Vec<CurveRow>)> {
    if low.obs != high.obs {
        return Err(Error::ConfigMismatch { expected: low.obs_hash()?, found: high.obs_hash()? });
    }
    let mut tr = Trainer::fresh(cfg.clone(), low.clone(), seed, "curriculum-low")?;
    tr.train(budgets.0, &mut on_update)?;
    let c1 = tr.checkpoint()?;
    let mut curve = std::mem::take(&mut tr.curve);
    drop(tr);
    let mut tr = Trainer::from_checkpoint(&c1, high.clone(), Preset::NonAdapt.mix(), None, None, "curriculum-high")?;
    tr.train(budgets.1, &mut on_update)?;
    let c2 = tr.checkpoint()?;
    curve.append(&mut tr.curve);
    Ok((vec![c1, c2], curve))
}

/// Fine-tunes `base` with rewards mixed from the discriminator and the
/// environment.
pub fn fine_tune_adapted(
    base: &Checkpoint,
    demos: &[Demonstration],
    env_cfg: &EnvConfig,
    mix: MixConfig,
    budget: u64,
    seed: u64,
    on_update: impl FnMut(&Trainer, &CurveRow) -> Result<()>,
) -> Result<(Checkpoint, Vec<CurveRow>)> {
    let expert = expert_data(demos, env_cfg)?;
    let mut tr = Trainer::from_checkpoint(base, env_cfg.clone(), mix, Some(expert), Some(seed), "adapt")?;
    tr.train(budget, on_update)?;
    Ok((tr.checkpoint()?, tr.curve))
}
