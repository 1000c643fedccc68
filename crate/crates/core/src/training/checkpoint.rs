//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `b"OMCK"`, version `u32`, config JSON (`u64` length + bytes), stage `u8`,
//! step `u64`, expanded `u8`, parameter count `u64`, then per parameter the
//! name (`u32` length + bytes), rank `u32`, dims `u64 × rank` and `f64`
//! values; then the optimiser step `u64`, slot count `u64`, per slot the name,
//! length `u64`, first and second moments; then trainer state JSON; finally a
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Adam, AdamConfig, AdamSlot};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OmniModel, TrainMode};

pub const MAGIC: &[u8; 4] = b"OMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Init,
    Pretrain,
    Stage1,
    Stage2,
}

impl StageTag {
    fn code(self) -> u8 {
        match self {
            StageTag::Init => 0,
            StageTag::Pretrain => 1,
            StageTag::Stage1 => 2,
            StageTag::Stage2 => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [StageTag::Init, StageTag::Pretrain, StageTag::Stage1, StageTag::Stage2]
            .into_iter()
            .find(|t| t.code() == c)
    }
}

/// Loop position saved alongside the weights so a run can resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Epochs completed in the current stage.
    pub epochs_done: usize,
    pub best_val: Option<f64>,
    pub bad_evals: usize,
    pub stopped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: OmniModel,
    pub stage: StageTag,
    pub step: u64,
    pub optimizer: Adam,
    pub state: TrainerState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Integrity { offset: self.pos as u64, msg: msg.into() }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
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
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(unit).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(self.err(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Integrity { offset: at as u64, msg: "name is not UTF-8".into() })
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let cfg = serde_json::to_vec(&ck.model.cfg).map_err(|e| Error::Data(e.to_string()))?;
    w.bytes(&cfg);
    w.u8(ck.stage.code());
    w.u64(ck.step);
    w.u8(ck.model.expanded as u8);
    let params = ck.model.named_params();
    w.u64(params.len() as u64);
    for (name, _, t) in &params {
        w.name(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    let adam = serde_json::to_vec(&ck.optimizer.cfg).map_err(|e| Error::Data(e.to_string()))?;
    w.bytes(&adam);
    w.u64(ck.optimizer.step);
    w.u64(ck.optimizer.slots.len() as u64);
    for (name, slot) in &ck.optimizer.slots {
        w.name(name);
        w.u64(slot.m.len() as u64);
        w.f64s(&slot.m);
        w.f64s(&slot.v);
    }
    let state = serde_json::to_vec(&ck.state).map_err(|e| Error::Data(e.to_string()))?;
    w.bytes(&state);
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    Ok(w.buf)
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Integrity { offset: buf.len() as u64, msg: "file too short".into() });
    }
    let body = &buf[..buf.len() - 32];
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity { offset: 0, msg: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity { offset: 4, msg: format!("version {version}, expected {VERSION}") });
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != &buf[buf.len() - 32..] {
        return Err(Error::Integrity { offset: body.len() as u64, msg: "checksum mismatch".into() });
    }
    let at = r.pos;
    let cfg: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Integrity { offset: at as u64, msg: format!("config: {e}") })?;
    let stage_at = r.pos;
    let stage = StageTag::from_code(r.u8()?)
        .ok_or_else(|| Error::Integrity { offset: stage_at as u64, msg: "unknown stage tag".into() })?;
    let step = r.u64()?;
    let expanded = r.u8()? != 0;
    let mut model = OmniModel::new(cfg, 0).map_err(|e| Error::Integrity { offset: at as u64, msg: e.to_string() })?;
    if expanded {
        model.expand(0)?;
    }
    let n = r.len(1)?;
    let mut values: BTreeMap<String, (Vec<usize>, Vec<f64>, usize)> = BTreeMap::new();
    for _ in 0..n {
        let at = r.pos;
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflow"))?;
        let data = r.f64s(count)?;
        values.insert(name, (shape, data, at));
    }
    let mut problem: Option<Error> = None;
    let mut seen = 0usize;
    model.visit_params_mut(&mut |name, _, t| {
        if problem.is_some() {
            return;
        }
        match values.get(name) {
            Some((shape, data, _)) if shape.as_slice() == t.shape() => {
                t.data_mut().copy_from_slice(data);
                seen += 1;
            }
            Some((shape, _, at)) => {
                problem = Some(Error::Integrity {
                    offset: *at as u64,
                    msg: format!("{name}: shape {shape:?}, model expects {:?}", t.shape()),
                })
            }
            None => problem = Some(Error::Integrity { offset: stage_at as u64, msg: format!("missing parameter {name}") }),
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if seen != values.len() {
        return Err(Error::Integrity { offset: stage_at as u64, msg: format!("{} unknown parameters", values.len() - seen) });
    }
    let at = r.pos;
    let adam_cfg: AdamConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Integrity { offset: at as u64, msg: format!("optimizer config: {e}") })?;
    let mut optimizer = Adam::new(adam_cfg);
    optimizer.step = r.u64()?;
    let slots = r.len(1)?;
    for _ in 0..slots {
        let name = r.name()?;
        let len = r.len(16)?;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        optimizer.slots.insert(name, AdamSlot { m, v });
    }
    let at = r.pos;
    let state: TrainerState = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Integrity { offset: at as u64, msg: format!("trainer state: {e}") })?;
    if r.pos != body.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    model.set_mode(TrainMode::Frozen);
    Ok(Checkpoint { model, stage, step, optimizer, state })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Hex SHA-256 of an encoded checkpoint.
pub fn checkpoint_digest(ck: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(ck)?)))
}
