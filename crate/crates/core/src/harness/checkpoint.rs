//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `FTCK` magic, `u32` version, `u32`-prefixed header text of `model.key=value`
//! lines, `u64` training step, `u32` tensor count, then per tensor a `u32`-prefixed
//! name, `u32` rank, `u64` dims and `f64` data. The optimizer section follows:
//! three `f64` hyperparameters, `u64` update count, a `u8` moment flag and, when
//! set, first then second moments for every tensor in order.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::train::{TrainConfig, Trainer};
use crate::numkernel::{AdamW, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub updates: u64,
    /// First and second moments per tensor; empty before the first update.
    pub moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl OptimizerState {
    fn of(opt: &AdamW) -> Self {
        let (m, v) = opt.moments();
        OptimizerState {
            lr_backbone: opt.lr_backbone,
            lr_other: opt.lr_other,
            weight_decay: opt.weight_decay,
            updates: opt.step_count(),
            moments: (!m.is_empty()).then(|| (m.to_vec(), v.to_vec())),
        }
    }

    fn build(&self) -> AdamW {
        let mut opt = AdamW::new(self.lr_backbone, self.lr_other, self.weight_decay);
        let (m, v) = self.moments.clone().unwrap_or_default();
        opt.restore(self.updates, m, v);
        opt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: usize,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

fn mismatch(msg: String) -> Error {
    Error::Version(msg)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(mismatch(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| mismatch("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| mismatch("non-UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    xs.iter().for_each(|x| out.extend(x.to_le_bytes()));
}

impl Checkpoint {
    /// Weights only; optimizer state is fresh.
    pub fn of_model(model: &Model) -> Self {
        Checkpoint {
            model: model.config.clone(),
            step: 0,
            tensors: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: OptimizerState::of(&AdamW::new(0.0, 0.0, 0.0)),
        }
    }

    pub fn of_trainer(trainer: &Trainer) -> Self {
        Checkpoint { step: trainer.step, optimizer: OptimizerState::of(&trainer.opt), ..Self::of_model(&trainer.model) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let header: String = self.model.entries().iter().map(|(k, v)| format!("model.{k}={v}\n")).collect();
        put_str(&mut out, &header);
        out.extend((self.step as u64).to_le_bytes());
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.shape().len() as u32).to_le_bytes());
            t.shape().iter().for_each(|&d| out.extend((d as u64).to_le_bytes()));
            put_f64s(&mut out, t.data());
        }
        let o = &self.optimizer;
        put_f64s(&mut out, &[o.lr_backbone, o.lr_other, o.weight_decay]);
        out.extend(o.updates.to_le_bytes());
        match &o.moments {
            None => out.push(0),
            Some((m, v)) => {
                out.push(1);
                m.iter().chain(v).for_each(|x| put_f64s(&mut out, x));
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(mismatch("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(mismatch(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let mut model = ModelConfig::default();
        for line in r.string()?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| mismatch(format!("bad header line `{line}`")))?;
            let key = k.strip_prefix("model.").ok_or_else(|| mismatch(format!("unknown header key `{k}`")))?;
            model.set(key, v)?;
        }
        let step = r.u64()? as usize;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let hyper = r.f64s(3)?;
        let updates = r.u64()?;
        let moments = match r.u8()? {
            0 => None,
            1 => {
                let mut read = || tensors.iter().map(|(_, t)| r.f64s(t.len())).collect::<Result<Vec<_>>>();
                let m = read()?;
                Some((m, read()?))
            }
            f => return Err(mismatch(format!("bad moment flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(mismatch(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let optimizer = OptimizerState { lr_backbone: hyper[0], lr_other: hyper[1], weight_decay: hyper[2], updates, moments };
        Ok(Checkpoint { model, step, tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Rebuilds the model, requiring every stored tensor to match the
    /// architecture's names and shapes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        if model.store.len() != self.tensors.len() {
            return Err(mismatch(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.tensors) {
            let p = model.store.get(id);
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(mismatch(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Resumes training with the stored optimizer state.
    pub fn to_trainer(&self, config: TrainConfig) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.to_model()?, config);
        trainer.opt = self.optimizer.build();
        trainer.step = self.step;
        Ok(trainer)
    }
}
