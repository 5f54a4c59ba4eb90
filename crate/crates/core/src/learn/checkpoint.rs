//! Checkpoint container.
//!
//! ```text
//! bytes 0..8    b"KRTMCKPT"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  header length H, u64 little-endian
//! next H bytes  header, UTF-8 JSON (metadata, architecture, tensor table)
//! rest          tensors in table order, f64 little-endian, row-major
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::gail::{DiscInput, Discriminator};
use super::mlp::{Activation, Mlp};
use super::normalizer::RunningNorm;
use super::policy::{ActorCritic, PolicyArch, ACTION_DIM};
use super::trainer::PolicyBundle;
use super::{MixConfig, TrainConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::hash::{config_hash, sha256_hex};

pub const MAGIC: &[u8; 8] = b"KRTMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscBundle {
    pub disc: Discriminator,
    pub opt: Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub env_hash: String,
    pub obs_hash: String,
    pub train_hash: String,
    pub mix: MixConfig,
    pub counters: Counters,
    /// Sampling stream state (policy/environment and discriminator).
    pub rng: ChaCha8Rng,
    pub d_rng: ChaCha8Rng,
}

impl CheckpointMeta {
    pub fn new(
        stage: &str,
        train: &TrainConfig,
        env: &EnvConfig,
        mix: MixConfig,
        counters: Counters,
        rng: &ChaCha8Rng,
        d_rng: &ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            stage: stage.to_string(),
            train: train.clone(),
            env: env.clone(),
            env_hash: env.hash()?,
            obs_hash: env.obs_hash()?,
            train_hash: config_hash(train)?,
            mix,
            counters,
            rng: rng.clone(),
            d_rng: d_rng.clone(),
        })
    }

    pub fn rng(&self) -> Result<ChaCha8Rng> {
        Ok(self.rng.clone())
    }

    pub fn d_rng(&self) -> Result<ChaCha8Rng> {
        Ok(self.d_rng.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub bundle: PolicyBundle,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DiscHeader {
    input: DiscInput,
    obs_dim: usize,
    widths: Vec<usize>,
    adam: AdamConfig,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arch: PolicyArch,
    norm_count: f64,
    norm_clip: f64,
    norm_fixed: usize,
    norm_pixel_scale: f64,
    adam: AdamConfig,
    adam_t: u64,
    disc: Option<DiscHeader>,
    tensors: Vec<TensorInfo>,
}

fn mlp_shapes(widths: &[usize]) -> Vec<Vec<usize>> {
    widths.windows(2).flat_map(|p| [vec![p[0], p[1]], vec![p[1]]]).collect()
}

struct TensorWriter {
    table: Vec<TensorInfo>,
    data: Vec<u8>,
}

impl TensorWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.table.push(TensorInfo { name, shape });
    }

    fn push_mlp(&mut self, prefix: &str, net: &Mlp) {
        for (k, (s, shape)) in net.slices().into_iter().zip(mlp_shapes(net.widths())).enumerate() {
            let kind = if k % 2 == 0 { "w" } else { "b" };
            self.push(format!("{prefix}.{}.{kind}", k / 2), shape, s);
        }
    }

    fn push_adam(&mut self, prefix: &str, opt: &Adam, shapes: &[Vec<usize>]) {
        for (k, (m, shape)) in opt.m.iter().zip(shapes).enumerate() {
            self.push(format!("{prefix}.m.{k}"), shape.clone(), m);
        }
        for (k, (v, shape)) in opt.v.iter().zip(shapes).enumerate() {
            self.push(format!("{prefix}.v.{k}"), shape.clone(), v);
        }
    }
}

struct TensorReader<'a> {
    table: std::slice::Iter<'a, TensorInfo>,
    data: &'a [u8],
}

impl TensorReader<'_> {
    fn take(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        let info = self.table.next().ok_or_else(|| Error::Format("checkpoint tensor table too short".into()))?;
        if info.shape != shape {
            return Err(Error::Format(format!("tensor {} has shape {:?}, expected {shape:?}", info.name, info.shape)));
        }
        let n: usize = shape.iter().product();
        if self.data.len() < n * 8 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.data.split_at(n * 8);
        self.data = rest;
        Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn take_mlp(&mut self, widths: &[usize], output: Activation) -> Result<Mlp> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in widths.windows(2) {
            let w = self.take(&[p[0], p[1]])?;
            weights.push(Array2::from_shape_vec((p[0], p[1]), w).map_err(|e| Error::Format(e.to_string()))?);
            biases.push(Array1::from(self.take(&[p[1]])?));
        }
        Mlp::from_parts(widths, output, weights, biases)
    }

    fn take_adam(&mut self, config: AdamConfig, t: u64, shapes: &[Vec<usize>]) -> Result<Adam> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for s in shapes {
            m.push(self.take(s)?);
        }
        for s in shapes {
            v.push(self.take(s)?);
        }
        Ok(Adam { config, t, m, v })
    }
}

fn policy_shapes(p: &ActorCritic) -> Vec<Vec<usize>> {
    let mut v = mlp_shapes(p.trunk.widths());
    v.extend(mlp_shapes(p.policy_head.widths()));
    v.extend(mlp_shapes(p.value_head.widths()));
    v
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let b = &self.bundle;
        let mut w = TensorWriter { table: Vec::new(), data: Vec::new() };
        w.push_mlp("trunk", &b.policy.trunk);
        w.push_mlp("policy_head", &b.policy.policy_head);
        w.push_mlp("value_head", &b.policy.value_head);
        let dim = b.norm.dim();
        w.push("norm.mean".into(), vec![dim], b.norm.mean.as_slice().unwrap());
        w.push("norm.var".into(), vec![dim], b.norm.var.as_slice().unwrap());
        w.push_adam("adam", &b.opt, &policy_shapes(&b.policy));
        let disc = b.disc.as_ref().map(|d| {
            w.push_mlp("disc", &d.disc.net);
            w.push_adam("disc_adam", &d.opt, &mlp_shapes(d.disc.net.widths()));
            DiscHeader {
                input: d.disc.input,
                obs_dim: d.disc.obs_dim,
                widths: d.disc.net.widths().to_vec(),
                adam: d.opt.config,
                adam_t: d.opt.t,
            }
        });
        let header = Header {
            meta: self.meta.clone(),
            arch: b.policy.arch().clone(),
            norm_count: b.norm.count,
            norm_clip: b.norm.clip,
            norm_fixed: b.norm.fixed,
            norm_pixel_scale: b.norm.pixel_scale,
            adam: b.opt.config,
            adam_t: b.opt.t,
            disc,
            tensors: w.table,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + w.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + hlen {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])?;
        let mut r = TensorReader { table: header.tensors.iter(), data: &bytes[20 + hlen..] };
        let arch = header.arch.clone();
        let mut tw = vec![arch.obs_dim];
        tw.extend(&arch.hidden);
        let h = *tw.last().unwrap();
        let trunk = r.take_mlp(&tw, Activation::Tanh)?;
        let policy_head = r.take_mlp(&[h, 2 * ACTION_DIM], Activation::Identity)?;
        let value_head = r.take_mlp(&[h, 1], Activation::Identity)?;
        let policy = ActorCritic::from_parts(arch.clone(), trunk, policy_head, value_head)?;
        let mean = Array1::from(r.take(&[arch.obs_dim])?);
        let var = Array1::from(r.take(&[arch.obs_dim])?);
        let norm = RunningNorm { count: header.norm_count, mean, var, clip: header.norm_clip, fixed: header.norm_fixed, pixel_scale: header.norm_pixel_scale };
        let opt = r.take_adam(header.adam, header.adam_t, &policy_shapes(&policy))?;
        let disc = match &header.disc {
            None => None,
            Some(d) => {
                let net = r.take_mlp(&d.widths, Activation::Identity)?;
                let opt = r.take_adam(d.adam, d.adam_t, &mlp_shapes(&d.widths))?;
                Some(DiscBundle { disc: Discriminator::from_parts(d.obs_dim, d.input, net)?, opt })
            }
        };
        if r.table.next().is_some() || !r.data.is_empty() {
            return Err(Error::Format("trailing data in checkpoint".into()));
        }
        Ok(Self { meta: header.meta, bundle: PolicyBundle { policy, norm, opt, disc } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, &bytes)?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
