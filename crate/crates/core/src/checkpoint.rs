//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic          8 bytes  "MOEECO01"
//! version        u32
//! next_epoch     u64
//! optimizer_step u64
//! weight_decay   f64
//! config         u32 length + UTF-8 bytes
//! dims           4 × u64  (n_features, feature_dim, router_hidden, n_classes)
//! tiers          u32 count + count × u64
//! tensors        u32 count, then per tensor:
//!                  u32 name length + name, u32 rank, rank × u64 dims, f64 data
//! rng states     u32 count, then per state:
//!                  u32 name length + name, 32-byte key, u64 stream, u128 word position
//! ```
//!
//! Tensors are the model parameters under their [`PARAM_NAMES`] followed by
//! the AdamW moments as `adam.m.<name>` and `adam.v.<name>`.

use crate::model::{ModelDims, MoeModel, MoeParams, TierConfig, PARAM_NAMES};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::Trainer;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MOEECO01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
}

/// A training state plus the config text it was produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn rng(&mut self, name: &str, s: &RngState) {
        self.str(name);
        self.0.extend_from_slice(&s.key);
        self.u64(s.stream);
        self.0.extend_from_slice(&s.word_pos.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflows usize"))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("invalid utf-8 string"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.usize())
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= self.buf.len() / 8)
            .ok_or_else(|| corrupt(format!("tensor {name} has an impossible shape")))?;
        let data = (0..len)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>, _>>()?;
        Ok((
            name,
            Tensor::from_vec(&shape, data).expect("length checked"),
        ))
    }
    fn rng(&mut self) -> Result<(String, RngState), CheckpointError> {
        let name = self.str()?;
        let key: [u8; 32] = self.take(32)?.try_into().unwrap();
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().unwrap());
        Ok((
            name,
            RngState {
                key,
                stream,
                word_pos,
            },
        ))
    }
}

const RNG_NAMES: [&str; 2] = ["shuffle", "routing"];

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let t = &ckpt.trainer;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(t.next_epoch as u64);
    w.u64(t.optimizer.step);
    w.f64(t.optimizer.weight_decay);
    w.str(&ckpt.config);
    let d = t.model.dims;
    for v in [d.n_features, d.feature_dim, d.router_hidden, d.n_classes] {
        w.u64(v as u64);
    }
    let sizes = t.model.tiers.tier_sizes();
    w.u32(sizes.len() as u32);
    for &s in sizes {
        w.u64(s as u64);
    }

    w.u32(3 * PARAM_NAMES.len() as u32);
    for (name, tensor) in t.model.params.tensors() {
        w.tensor(name, tensor);
    }
    for (name, tensor) in t.optimizer.first_moment.tensors() {
        w.tensor(&format!("adam.m.{name}"), tensor);
    }
    for (name, tensor) in t.optimizer.second_moment.tensors() {
        w.tensor(&format!("adam.v.{name}"), tensor);
    }

    w.u32(RNG_NAMES.len() as u32);
    w.rng(RNG_NAMES[0], &RngState::capture(&t.shuffle_rng));
    w.rng(RNG_NAMES[1], &RngState::capture(&t.routing_rng));
    w.0
}

fn fill_params(
    target: &mut MoeParams,
    prefix: &str,
    tensors: &mut Vec<(String, Tensor)>,
) -> Result<(), CheckpointError> {
    for (name, slot) in target.tensors_mut() {
        let full = format!("{prefix}{name}");
        let pos = tensors
            .iter()
            .position(|(n, _)| *n == full)
            .ok_or_else(|| corrupt(format!("missing tensor {full}")))?;
        let (_, t) = tensors.remove(pos);
        if t.shape() != slot.shape() {
            return Err(corrupt(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| corrupt("missing magic"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let next_epoch = r.usize()?;
    let step = r.u64()?;
    let weight_decay = r.f64()?;
    let config = r.str()?;
    let dims = ModelDims {
        n_features: r.usize()?,
        feature_dim: r.usize()?,
        router_hidden: r.usize()?,
        n_classes: r.usize()?,
    };
    let n_tiers = r.u32()? as usize;
    let sizes = (0..n_tiers)
        .map(|_| r.usize())
        .collect::<Result<Vec<_>, _>>()?;
    let tiers = TierConfig::new(sizes).map_err(|e| corrupt(e.to_string()))?;

    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors.min(64));
    for _ in 0..n_tensors {
        tensors.push(r.tensor()?);
    }
    let n = tiers.n_experts();
    let mut params = MoeParams::zeros(&dims, n);
    fill_params(&mut params, "", &mut tensors)?;
    let mut optimizer = AdamW::new(&params, weight_decay);
    optimizer.step = step;
    fill_params(&mut optimizer.first_moment, "adam.m.", &mut tensors)?;
    fill_params(&mut optimizer.second_moment, "adam.v.", &mut tensors)?;
    if let Some((name, _)) = tensors.first() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }

    let n_rngs = r.u32()? as usize;
    let mut rngs = Vec::with_capacity(n_rngs.min(8));
    for _ in 0..n_rngs {
        rngs.push(r.rng()?);
    }
    let find = |want: &str| {
        rngs.iter()
            .find(|(n, _)| n == want)
            .map(|(_, s)| s.restore())
            .ok_or_else(|| corrupt(format!("missing rng state {want}")))
    };
    let shuffle_rng = find(RNG_NAMES[0])?;
    let routing_rng = find(RNG_NAMES[1])?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    Ok(Checkpoint {
        trainer: Trainer {
            model: MoeModel {
                dims,
                tiers,
                params,
            },
            optimizer,
            shuffle_rng,
            routing_rng,
            next_epoch,
        },
        config,
    })
}
