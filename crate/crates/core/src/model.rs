//! Network configuration, named weights, and the checkpoint file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CVOS";
const CHECKPOINT_VERSION: u32 = 1;

/// Two stride-2 encoder stages.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub feat_channels: usize,
    pub key_channels: usize,
    pub value_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            feat_channels: 16,
            key_channels: 8,
            value_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(CoreError::Config(format!(
                "input {}x{} not divisible by {}",
                self.height, self.width, DOWNSAMPLE
            )));
        }
        if self.key_channels == 0 || self.value_channels == 0 || self.feat_channels == 0 {
            return Err(CoreError::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / DOWNSAMPLE, self.width / DOWNSAMPLE)
    }
}

/// All learnable parameters, keyed by name. BTreeMap keeps iteration (and
/// therefore checkpoints and optimizer updates) in a deterministic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<S: Scalar> {
    tensors: BTreeMap<String, Tensor<S>>,
}

/// (name, out_channels, in_channels, kernel) for every conv layer.
fn layer_specs(cfg: &ModelConfig) -> Vec<(&'static str, usize, usize, usize)> {
    let (cf, ck, cv) = (cfg.feat_channels, cfg.key_channels, cfg.value_channels);
    vec![
        ("qenc.conv1", cf, 3, 3),
        ("qenc.conv2", cf, cf, 3),
        ("qenc.conv3", cf, cf, 3),
        ("menc.conv1", cf, 4, 3),
        ("menc.conv2", cf, cf, 3),
        ("menc.conv3", cf, cf, 3),
        ("head.key", ck, cf, 1),
        ("head.value", cv, cf, 1),
        ("dec.conv1", cf, 2 * cv, 3),
        ("dec.conv2", cf, cf, 3),
        ("dec.conv3", 1, cf, 3),
    ]
}

impl<S: Scalar> Weights<S> {
    /// Seeded uniform init in [-a, a], a = sqrt(1 / fan_in).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, cout, cin, k) in layer_specs(cfg) {
            let fan_in = cin * k * k;
            tensors.insert(
                format!("{name}.w"),
                Tensor::uniform_fan_in(&[cout, cin, k, k], fan_in, &mut rng),
            );
            tensors.insert(
                format!("{name}.b"),
                Tensor::uniform_fan_in(&[cout], fan_in, &mut rng),
            );
        }
        Weights { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Weights { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight tensor {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown weight tensor {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Weights<T> {
        Weights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Order-stable digest of the raw bits, for "weights untouched" checks.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the little-endian f32 bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.tensors {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in (v.to_f64() as f32).to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Checkpoint layout: magic "CVOS", version, ModelConfig block, tensor count,
/// then per-tensor records (name length + name bytes, rank, dims,
/// little-endian f32 data). Round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, weights: &Weights<f32>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.height,
        cfg.width,
        cfg.feat_channels,
        cfg.key_channels,
        cfg.value_channels,
        DOWNSAMPLE,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(weights.tensors.len() as u32).to_le_bytes());
    for (name, t) in &weights.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Weights<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CoreError::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(CoreError::Format("bad checkpoint magic".into()));
    }
    let version = take_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let height = take_u32(&mut pos)? as usize;
    let width = take_u32(&mut pos)? as usize;
    let feat_channels = take_u32(&mut pos)? as usize;
    let key_channels = take_u32(&mut pos)? as usize;
    let value_channels = take_u32(&mut pos)? as usize;
    let down = take_u32(&mut pos)? as usize;
    if down != DOWNSAMPLE {
        return Err(CoreError::Format(format!(
            "checkpoint downsample factor {down}, expected {DOWNSAMPLE}"
        )));
    }
    let cfg = ModelConfig {
        height,
        width,
        feat_channels,
        key_channels,
        value_channels,
    };

    let count = take_u32(&mut pos)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CoreError::Format("non-utf8 tensor name".into()))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    if pos != bytes.len() {
        return Err(CoreError::Format("trailing bytes in checkpoint".into()));
    }
    Ok((cfg, Weights { tensors }))
}
