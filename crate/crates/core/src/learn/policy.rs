//! Gaussian actor-critic with a shared tanh trunk, and the clipped-surrogate
//! PPO update.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam, AdamConfig};
use super::mlp::{Activation, Mlp, MlpGrads};
use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 6;
pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 0.5;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

const LS_MID: f64 = (LOG_STD_MAX + LOG_STD_MIN) / 2.0;
const LS_HALF: f64 = (LOG_STD_MAX - LOG_STD_MIN) / 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    /// Trunk hidden widths; the last one feeds both heads.
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl PolicyArch {
    pub fn new(obs_dim: usize) -> Self {
        Self { obs_dim, hidden: vec![256, 128], init_log_std: -0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad policy architecture {self:?}")));
        }
        if !(LOG_STD_MIN < self.init_log_std && self.init_log_std < LOG_STD_MAX) {
            return Err(Error::InvalidConfig(format!(
                "init_log_std must lie in ({LOG_STD_MIN}, {LOG_STD_MAX})"
            )));
        }
        Ok(())
    }
}

/// Smoothly bounded log standard deviation from a raw head output.
pub fn squash_log_std(raw: f64) -> f64 {
    LS_MID + LS_HALF * raw.tanh()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    arch: PolicyArch,
    pub trunk: Mlp,
    /// 6 means followed by 6 raw log-std outputs.
    pub policy_head: Mlp,
    pub value_head: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCriticGrads {
    pub trunk: MlpGrads,
    pub policy_head: MlpGrads,
    pub value_head: MlpGrads,
}

impl ActorCriticGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.policy_head.slices());
        v.extend(self.value_head.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.policy_head.slices_mut());
        v.extend(self.value_head.slices_mut());
        v
    }
}

/// Batched policy output.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub means: Array2<f64>,
    pub log_stds: Array2<f64>,
    pub values: Array1<f64>,
}

impl ActorCritic {
    pub fn new(arch: PolicyArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.obs_dim];
        widths.extend(&arch.hidden);
        let h = *widths.last().unwrap();
        let trunk = Mlp::new(&widths, Activation::Tanh, rng)?;
        let mut policy_head = Mlp::new(&[h, 2 * ACTION_DIM], Activation::Identity, rng)?;
        policy_head.scale_output_layer(0.01);
        let raw0 = ((arch.init_log_std - LS_MID) / LS_HALF).atanh();
        policy_head.output_bias_mut().slice_mut(s![ACTION_DIM..]).fill(raw0);
        let mut value_head = Mlp::new(&[h, 1], Activation::Identity, rng)?;
        value_head.scale_output_layer(0.1);
        Ok(Self { arch, trunk, policy_head, value_head })
    }

    pub fn from_parts(arch: PolicyArch, trunk: Mlp, policy_head: Mlp, value_head: Mlp) -> Result<Self> {
        arch.validate()?;
        let h = *arch.hidden.last().unwrap();
        let mut widths = vec![arch.obs_dim];
        widths.extend(&arch.hidden);
        if trunk.widths() != widths.as_slice()
            || policy_head.widths() != [h, 2 * ACTION_DIM]
            || value_head.widths() != [h, 1]
        {
            return Err(Error::Shape("actor-critic parts do not match the architecture".into()));
        }
        Ok(Self { arch, trunk, policy_head, value_head })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.obs_dim
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.policy_head.slices());
        v.extend(self.value_head.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.policy_head.slices_mut());
        v.extend(self.value_head.slices_mut());
        v
    }

    pub fn slice_sizes(&self) -> Vec<usize> {
        self.slices().iter().map(|s| s.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.policy_head.is_finite() && self.value_head.is_finite()
    }

    pub fn forward(&self, obs: ArrayView2<f64>) -> Result<PolicyOutput> {
        let h = self.trunk.predict(obs)?;
        let p = self.policy_head.predict(h.view())?;
        let v = self.value_head.predict(h.view())?;
        Ok(PolicyOutput {
            means: p.slice(s![.., ..ACTION_DIM]).to_owned(),
            log_stds: p.slice(s![.., ACTION_DIM..]).mapv(squash_log_std),
            values: v.column(0).to_owned(),
        })
    }

    /// Samples one action per row (raw, unclipped); masked dims are zero and
    /// excluded from the log-probability.
    pub fn sample(
        &self,
        out: &PolicyOutput,
        mask: &[bool; ACTION_DIM],
        deterministic: bool,
        rng: &mut impl Rng,
    ) -> (Array2<f64>, Array1<f64>) {
        let n = out.means.nrows();
        let mut actions = Array2::zeros((n, ACTION_DIM));
        for i in 0..n {
            for j in 0..ACTION_DIM {
                if !mask[j] {
                    continue;
                }
                let mu = out.means[[i, j]];
                actions[[i, j]] = if deterministic {
                    mu
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + out.log_stds[[i, j]].exp() * z
                };
            }
        }
        let logp = log_prob(&out.means.view(), &out.log_stds.view(), &actions.view(), mask);
        (actions, logp)
    }
}

/// Diagonal-Gaussian log density over the unmasked dims, one value per row.
pub fn log_prob(
    means: &ArrayView2<f64>,
    log_stds: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    mask: &[bool; ACTION_DIM],
) -> Array1<f64> {
    Array1::from_shape_fn(means.nrows(), |i| {
        let mut lp = 0.0;
        for j in 0..ACTION_DIM {
            if mask[j] {
                let ls = log_stds[[i, j]];
                let z = (actions[[i, j]] - means[[i, j]]) / ls.exp();
                lp += -0.5 * z * z - ls - 0.5 * LOG_2PI;
            }
        }
        lp
    })
}

pub fn entropy(log_stds: &ArrayView2<f64>, mask: &[bool; ACTION_DIM]) -> Array1<f64> {
    Array1::from_shape_fn(log_stds.nrows(), |i| {
        (0..ACTION_DIM).filter(|&j| mask[j]).map(|j| log_stds[[i, j]] + 0.5 * (1.0 + LOG_2PI)).sum()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Steps collected per environment between updates.
    pub horizon: usize,
    pub n_envs: usize,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            lr: 3e-4,
            epochs: 4,
            minibatch: 256,
            horizon: 128,
            n_envs: 8,
            gae_lambda: 0.95,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && self.clip < 1.0
            && self.lr > 0.0
            && self.epochs > 0
            && self.minibatch > 0
            && self.horizon > 0
            && self.n_envs > 0
            && self.gae_lambda > 0.0
            && self.gae_lambda <= 1.0
            && self.entropy_coef >= 0.0
            && self.value_coef >= 0.0
            && self.max_grad_norm > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid PPO config {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Training samples for one PPO update.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    /// Normalized observations, one per row.
    pub obs: Array2<f64>,
    /// Raw (unclipped) sampled actions.
    pub actions: Array2<f64>,
    pub logp_old: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
    pub mask: [bool; ACTION_DIM],
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.actions.dim() != (n, ACTION_DIM)
            || self.logp_old.len() != n
            || self.advantages.len() != n
            || self.returns.len() != n
        {
            return Err(Error::Shape("PPO batch arrays disagree in length".into()));
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            obs: self.obs.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            logp_old: self.logp_old.select(Axis(0), idx),
            advantages: self.advantages.select(Axis(0), idx),
            returns: self.returns.select(Axis(0), idx),
            mask: self.mask,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Generalized advantage estimates and returns for one environment's
/// trajectory segment. `dones[t]` marks steps after which no bootstrapping
/// happens; `last_value` bootstraps the segment end.
pub fn compute_gae(
    rewards: ArrayView1<f64>,
    values: ArrayView1<f64>,
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Array1<f64>, Array1<f64>) {
    let n = rewards.len();
    let mut adv = Array1::zeros(n);
    let mut next_value = last_value;
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * nonterminal - values[t];
        gae = delta + gamma * lambda * nonterminal * gae;
        adv[t] = gae;
        next_value = values[t];
    }
    let returns = &adv + &values;
    (adv, returns)
}

impl ActorCritic {
    /// Clipped-surrogate loss (mean over the batch) and its gradients.
    pub fn ppo_loss(&self, batch: &PpoBatch, cfg: &PpoConfig) -> Result<(LossTerms, ActorCriticGrads)> {
        batch.check()?;
        let n = batch.len();
        if n == 0 {
            return Err(Error::Contract("empty PPO batch".into()));
        }
        let nf = n as f64;
        let trunk_cache = self.trunk.forward(batch.obs.view())?;
        let h = trunk_cache.output();
        let head_cache = self.policy_head.forward(h.view())?;
        let val_cache = self.value_head.forward(h.view())?;
        let raw = head_cache.output();
        let means = raw.slice(s![.., ..ACTION_DIM]);
        let raw_ls = raw.slice(s![.., ACTION_DIM..]);
        let log_stds = raw_ls.mapv(squash_log_std);
        let values = val_cache.output().column(0).to_owned();
        let logp = log_prob(&means, &log_stds.view(), &batch.actions.view(), &batch.mask);
        let ent = entropy(&log_stds.view(), &batch.mask);

        let mut terms = LossTerms::default();
        let mut g_head = Array2::zeros((n, 2 * ACTION_DIM));
        let mut g_val = Array2::zeros((n, 1));
        let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
        for i in 0..n {
            let log_ratio = logp[i] - batch.logp_old[i];
            let r = log_ratio.exp();
            let a = batch.advantages[i];
            let unclipped = r * a;
            let clipped = r.clamp(lo, hi) * a;
            terms.policy -= unclipped.min(clipped) / nf;
            terms.approx_kl += ((r - 1.0) - log_ratio) / nf;
            let is_clipped = (a >= 0.0 && r > hi) || (a < 0.0 && r < lo);
            if r > hi || r < lo {
                terms.clip_frac += 1.0 / nf;
            }
            let d_logp = if is_clipped { 0.0 } else { -a * r / nf };
            for j in 0..ACTION_DIM {
                if !batch.mask[j] {
                    continue;
                }
                let ls = log_stds[[i, j]];
                let inv_var = (-2.0 * ls).exp();
                let diff = batch.actions[[i, j]] - means[[i, j]];
                g_head[[i, j]] = d_logp * diff * inv_var;
                let d_ls = d_logp * (diff * diff * inv_var - 1.0) - cfg.entropy_coef / nf;
                let t = raw_ls[[i, j]].tanh();
                g_head[[i, ACTION_DIM + j]] = d_ls * LS_HALF * (1.0 - t * t);
            }
            let err = values[i] - batch.returns[i];
            terms.value += 0.5 * err * err / nf;
            g_val[[i, 0]] = cfg.value_coef * err / nf;
            terms.entropy += ent[i] / nf;
        }
        terms.total = terms.policy + cfg.value_coef * terms.value - cfg.entropy_coef * terms.entropy;
        if !terms.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite PPO loss {terms:?}")));
        }
        let (gp, dh_p) = self.policy_head.backward(&head_cache, g_head.view())?;
        let (gv, dh_v) = self.value_head.backward(&val_cache, g_val.view())?;
        let (gt, _) = self.trunk.backward(&trunk_cache, (dh_p + dh_v).view())?;
        Ok((terms, ActorCriticGrads { trunk: gt, policy_head: gp, value_head: gv }))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// KL(old || new) estimated on the whole batch after the update.
    pub kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates. Advantages are
/// normalized over the whole batch first. Aborts (leaving the policy as it was
/// before the failing minibatch) on a non-finite loss or parameter.
pub fn ppo_update(
    policy: &mut ActorCritic,
    opt: &mut Adam,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    cfg.validate()?;
    batch.check()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty PPO batch".into()));
    }
    let mut batch = batch.clone();
    let mean = batch.advantages.mean().unwrap();
    let std = batch.advantages.std(0.0);
    batch.advantages.mapv_inplace(|a| (a - mean) / (std + 1e-8));

    let mut stats = PpoStats::default();
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mb = batch.select(chunk);
            let (terms, mut grads) = policy.ppo_loss(&mb, cfg)?;
            let norm = clip_grad_norm(grads.slices_mut(), cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient norm, loss terms {terms:?}")));
            }
            let backup = policy.clone();
            opt.step(policy.slices_mut(), grads.slices())?;
            if !policy.is_finite() {
                *policy = backup;
                return Err(Error::Numerical(format!("update produced non-finite parameters, loss terms {terms:?}")));
            }
            stats.policy_loss += terms.policy;
            stats.value_loss += terms.value;
            stats.entropy += terms.entropy;
            stats.clip_frac += terms.clip_frac;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.clip_frac /= m;
    stats.grad_norm /= m;
    let out = policy.forward(batch.obs.view())?;
    let logp = log_prob(&out.means.view(), &out.log_stds.view(), &batch.actions.view(), &batch.mask);
    stats.kl = (0..n)
        .map(|i| {
            let lr = logp[i] - batch.logp_old[i];
            (lr.exp() - 1.0) - lr
        })
        .sum::<f64>()
        / n as f64;
    Ok(stats)
}
