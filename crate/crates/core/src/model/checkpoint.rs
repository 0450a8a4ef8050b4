//! Checkpoint serialization and weight transfer.
//!
//! Byte layout (little-endian), with a CRC-32 of all preceding bytes at the end:
//!
//! ```text
//! magic      8 bytes  "DVOXCKPT"
//! version    u32      1
//! dtype      u32      element width in bytes (4 or 8)
//! epoch      u64
//! seed       u64
//! config     u32 length + UTF-8 JSON model config
//! n_tensors  u32
//! table      n_tensors × { u16 name length, name, u8 trainable, u8 section, 5 × u32 dims }
//! optimizer  u8 present; if 1: u16 kind length, kind, u64 step
//! payloads   raw elements of each table entry, in table order
//! crc32      u32
//! ```
//!
//! `section` is 0 for model tensors and 1 for optimizer slots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::config::ModelConfig;
use super::net::Model;
use crate::binio::{unseal, Reader, Writer};
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::{Real, Shape, Tensor5};

pub const MAGIC: &[u8; 8] = b"DVOXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: String,
    pub step: u64,
    pub slots: Vec<Parameter<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub epoch: u64,
    pub seed: u64,
    pub tensors: Vec<Parameter<T>>,
    pub optimizer: Option<OptimizerState<T>>,
}

/// What a transfer did, by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub initialized: Vec<String>,
    pub ignored: Vec<String>,
}

fn write_payload<T: Real>(w: &mut Writer, v: &[T]) {
    if T::BYTES == 4 {
        w.f32s(&v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>());
    } else {
        w.f64s(&v.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(T::BYTES as u32);
        w.u64(self.epoch);
        w.u64(self.seed);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.u32(cfg.len() as u32);
        w.bytes(&cfg);
        let slots = self.optimizer.as_ref().map(|o| o.slots.as_slice()).unwrap_or(&[]);
        let all: Vec<(&Parameter<T>, u8)> = self
            .tensors
            .iter()
            .map(|p| (p, 0))
            .chain(slots.iter().map(|p| (p, 1)))
            .collect();
        w.u32(all.len() as u32);
        for (p, section) in &all {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` too long", p.name)))?;
            w.u16(len);
            w.bytes(name);
            w.u8(u8::from(p.trainable));
            w.u8(*section);
            for d in p.value.shape().0 {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("`{}` extent {d} exceeds u32", p.name)))?;
                w.u32(d);
            }
        }
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                w.u16(o.kind.len() as u16);
                w.bytes(o.kind.as_bytes());
                w.u64(o.step);
            }
            None => w.u8(0),
        }
        for (p, _) in &all {
            write_payload(&mut w, p.value.data());
        }
        Ok(w.seal())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let body = unseal(bytes, "checkpoint")?;
        let mut r = Reader::new(&body[MAGIC.len()..]);
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let width = r.u32("dtype")? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported element width {width}")));
        }
        let epoch = r.u64("epoch")?;
        let seed = r.u64("seed")?;
        let cfg_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u16("name length")? as usize;
            let name = r.string(len, "tensor name")?;
            let trainable = match r.u8("trainable flag")? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad trainable flag {v} for `{name}`"))),
            };
            let section = r.u8("section")?;
            if section > 1 {
                return Err(Error::Format(format!("bad section {section} for `{name}`")));
            }
            let mut dims = [0usize; 5];
            for d in &mut dims {
                *d = r.u32("dims")? as usize;
            }
            table.push((name, trainable, section, Shape(dims)));
        }
        let optimizer_meta = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let len = r.u16("optimizer kind length")? as usize;
                let kind = r.string(len, "optimizer kind")?;
                Some((kind, r.u64("optimizer step")?))
            }
            v => return Err(Error::Format(format!("bad optimizer flag {v}"))),
        };
        let mut tensors = Vec::new();
        let mut slots = Vec::new();
        for (name, trainable, section, shape) in table {
            let numel = shape
                .checked_numel()
                .ok_or_else(|| Error::Format(format!("`{name}` extents overflow")))?;
            let data = r.reals::<T>(numel, width, &name)?;
            let p = Parameter::new(name, Tensor5::from_vec(shape, data)?, trainable)
                .map_err(|e| Error::Format(e.to_string()))?;
            if section == 0 { tensors.push(p) } else { slots.push(p) }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after payloads", r.remaining())));
        }
        let optimizer = match optimizer_meta {
            Some((kind, step)) => Some(OptimizerState { kind, step, slots }),
            None if slots.is_empty() => None,
            None => return Err(Error::Format("optimizer slots without optimizer header".into())),
        };
        Ok(Self {
            config,
            epoch,
            seed,
            tensors,
            optimizer,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Parameter<T>> {
        self.tensors.iter().find(|p| p.name == name)
    }
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

impl<T: Real> Model<T> {
    pub fn to_checkpoint(&self, epoch: u64, seed: u64) -> Checkpoint<T> {
        Checkpoint {
            config: self.config().clone(),
            epoch,
            seed,
            tensors: self
                .params()
                .into_iter()
                .map(|p| {
                    let mut p = p.clone();
                    p.value.clear_grad();
                    p
                })
                .collect(),
            optimizer: None,
        }
    }

    /// Rebuilds exactly the checkpointed model; every tensor must be present
    /// with a matching shape.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone())?;
        let own: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let theirs: BTreeSet<String> = ckpt.tensors.iter().map(|p| p.name.clone()).collect();
        if own != theirs {
            let missing: Vec<_> = own.difference(&theirs).cloned().collect();
            let extra: Vec<_> = theirs.difference(&own).cloned().collect();
            return Err(Error::Format(format!(
                "checkpoint tensors do not match its config: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let report = model.transfer_from(ckpt)?;
        debug_assert!(report.initialized.is_empty());
        Ok(model)
    }

    /// Copies every tensor whose name also exists in `ckpt`; tensors the
    /// checkpoint lacks keep their fresh initialization (zero for offset
    /// predictors). Fails without modifying the model if a shared name has a
    /// different shape or nothing is shared.
    pub fn transfer_from(&mut self, ckpt: &Checkpoint<T>) -> Result<TransferReport> {
        let source: BTreeMap<&str, &Parameter<T>> = ckpt.tensors.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut conflicts = Vec::new();
        let mut report = TransferReport::default();
        for p in self.params() {
            match source.get(p.name.as_str()) {
                Some(src) if src.value.shape() != p.value.shape() => conflicts.push(format!(
                    "{} (checkpoint {}, model {})",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )),
                Some(_) => report.copied.push(p.name.clone()),
                None => report.initialized.push(p.name.clone()),
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::Transfer(format!("shape conflict on {}", conflicts.join(", "))));
        }
        if report.copied.is_empty() {
            return Err(Error::Transfer("checkpoint shares no parameters with the model".into()));
        }
        let own: BTreeSet<String> = self.params().iter().map(|p| p.name.clone()).collect();
        report.ignored = ckpt.tensors.iter().filter(|p| !own.contains(&p.name)).map(|p| p.name.clone()).collect();
        for p in self.params_mut() {
            if let Some(src) = source.get(p.name.as_str()) {
                p.value.data_mut().copy_from_slice(src.value.data());
                p.value.clear_grad();
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path, epoch: u64, seed: u64) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(epoch, seed), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Builds `target` and fills it from the checkpoint at `path` with transfer semantics.
    pub fn load_transfer(path: &Path, target: ModelConfig) -> Result<(Self, TransferReport)> {
        let ckpt = load_checkpoint(path)?;
        let mut model = Self::new(target)?;
        let report = model.transfer_from(&ckpt)?;
        Ok((model, report))
    }
}
