//! Discriminator `D(o, a)` and the imitation reward derived from it.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam};
use super::mlp::{Activation, Mlp, MlpGrads};
use super::policy::ACTION_DIM;
use crate::error::{Error, Result};

/// Observation entries after the frames: position (3), quaternion (4), distance.
pub const LOW_DIM_OBS: usize = 8;
const D_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// The full flattened observation.
    Full,
    /// Tool pose and distance only (the last eight observation entries).
    LowDim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GailRewardForm {
    /// `-ln(1 - D)`.
    LogSurrogate,
    /// `D` itself.
    Raw,
}

/// Imitation reward for discriminator outputs `d`, clamped away from 0 and 1.
pub fn gail_reward(d: f64, form: GailRewardForm) -> f64 {
    let d = d.clamp(D_CLAMP, 1.0 - D_CLAMP);
    match form {
        GailRewardForm::LogSurrogate => -(1.0 - d).ln(),
        GailRewardForm::Raw => d,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input: DiscInput,
    pub obs_dim: usize,
    pub net: Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscStats {
    pub loss: f64,
    /// Fraction of expert samples with `D > 0.5`.
    pub expert_acc: f64,
    /// Fraction of policy samples with `D < 0.5`.
    pub policy_acc: f64,
    pub balanced_acc: f64,
}

impl Discriminator {
    pub fn new(obs_dim: usize, input: DiscInput, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let d_in = match input {
            DiscInput::Full => obs_dim,
            DiscInput::LowDim => {
                if obs_dim < LOW_DIM_OBS {
                    return Err(Error::Shape(format!("observation of length {obs_dim} has no pose block")));
                }
                LOW_DIM_OBS
            }
        } + ACTION_DIM;
        let mut widths = vec![d_in];
        widths.extend(hidden);
        widths.push(1);
        Ok(Self { input, obs_dim, net: Mlp::new(&widths, Activation::Identity, rng)? })
    }

    pub fn from_parts(obs_dim: usize, input: DiscInput, net: Mlp) -> Result<Self> {
        let d_in = match input {
            DiscInput::Full => obs_dim,
            DiscInput::LowDim => LOW_DIM_OBS,
        } + ACTION_DIM;
        if net.input_dim() != d_in || net.output_dim() != 1 {
            return Err(Error::Shape("discriminator network does not match its input mode".into()));
        }
        Ok(Self { input, obs_dim, net })
    }

    /// Network input rows from normalized observations and actions scaled to [-1, 1].
    pub fn features(&self, obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if obs.ncols() != self.obs_dim || actions.ncols() != ACTION_DIM || obs.nrows() != actions.nrows() {
            return Err(Error::Shape(format!(
                "discriminator expects [n, {}] observations and [n, {ACTION_DIM}] actions, got {:?} and {:?}",
                self.obs_dim,
                obs.dim(),
                actions.dim()
            )));
        }
        let o = match self.input {
            DiscInput::Full => obs.view(),
            DiscInput::LowDim => obs.slice(s![.., self.obs_dim - LOW_DIM_OBS..]),
        };
        Ok(concatenate(Axis(1), &[o, actions.view()]).expect("row counts checked"))
    }

    /// `D` for feature rows; strictly inside (0, 1) for finite logits.
    pub fn prob_features(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(x)?.column(0).mapv(sigmoid))
    }

    pub fn prob(&self, obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.prob_features(self.features(obs, actions)?.view())
    }

    /// Class-balanced logistic loss (expert = 1, policy = 0) and its gradients.
    pub fn loss(&self, expert: ArrayView2<f64>, policy: ArrayView2<f64>) -> Result<(DiscStats, MlpGrads)> {
        let (ne, np) = (expert.nrows(), policy.nrows());
        if ne == 0 || np == 0 {
            return Err(Error::Contract("discriminator update needs expert and policy samples".into()));
        }
        let x = concatenate(Axis(0), &[expert.view(), policy.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let cache = self.net.forward(x.view())?;
        let z = cache.output().column(0).to_owned();
        let mut g = Array2::zeros((ne + np, 1));
        let mut st = DiscStats::default();
        for i in 0..ne + np {
            let p = sigmoid(z[i]);
            if i < ne {
                st.loss += softplus(-z[i]) / ne as f64;
                g[[i, 0]] = (p - 1.0) / ne as f64;
                st.expert_acc += if p > 0.5 { 1.0 / ne as f64 } else { 0.0 };
            } else {
                st.loss += softplus(z[i]) / np as f64;
                g[[i, 0]] = p / np as f64;
                st.policy_acc += if p < 0.5 { 1.0 / np as f64 } else { 0.0 };
            }
        }
        st.balanced_acc = 0.5 * (st.expert_acc + st.policy_acc);
        if !st.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite discriminator loss {st:?}")));
        }
        let (grads, _) = self.net.backward(&cache, g.view())?;
        Ok((st, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscUpdateConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
}

impl Default for DiscUpdateConfig {
    fn default() -> Self {
        Self { epochs: 1, minibatch: 256, max_grad_norm: 1.0 }
    }
}

/// Logistic-loss steps on feature rows; each minibatch pairs a shuffled slice
/// of the policy rows with an equally sized random draw of expert rows.
/// Returns statistics for the full batches after the update.
pub fn discriminator_update(
    disc: &mut Discriminator,
    opt: &mut Adam,
    expert: ArrayView2<f64>,
    policy: ArrayView2<f64>,
    cfg: &DiscUpdateConfig,
    rng: &mut impl Rng,
) -> Result<DiscStats> {
    if expert.nrows() == 0 || policy.nrows() == 0 {
        return Err(Error::Contract("discriminator update needs expert and policy samples".into()));
    }
    let mut idx: Vec<usize> = (0..policy.nrows()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch.max(1)) {
            let pe: Vec<usize> = (0..chunk.len()).map(|_| rng.gen_range(0..expert.nrows())).collect();
            let eb = expert.select(Axis(0), &pe);
            let pb = policy.select(Axis(0), chunk);
            let (_, mut grads) = disc.loss(eb.view(), pb.view())?;
            clip_grad_norm(grads.slices_mut(), cfg.max_grad_norm);
            opt.step(disc.net.slices_mut(), grads.slices())?;
        }
    }
    Ok(disc.loss(expert, policy)?.0)
}
