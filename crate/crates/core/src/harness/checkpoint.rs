//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DDDM" u32:version
//! str:config  u8:trained  u64:epoch
//! [u8; 32]:rng_seed  u64:rng_stream  u128:rng_word_pos
//! u64:n_blocks  { str:name  u64:rank  u64 × rank:shape  f64 × len }
//! f64 × 6:optimizer config  u64:step_count  u64:opt_epoch
//! f64 × n_blocks:lr_scale  { f64 × len:first_moment } { f64 × len:second_moment }
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8 bytes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DddmError, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;
use crate::harness::train::TrainState;
use crate::tensor::{AdamWConfig, Tensor};

pub const MAGIC: &[u8; 4] = b"DDDM";
pub const VERSION: u32 = 1;

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
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
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                DddmError::Format(format!(
                    "checkpoint truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| DddmError::Format(format!("implausible length {n} for {what}")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| DddmError::Format(format!("{what} is not UTF-8")))
    }
    fn fill(&mut self, t: &mut Tensor, what: &str) -> Result<()> {
        for v in t.data_mut() {
            *v = self.f64(what)?;
        }
        Ok(())
    }
}

pub fn to_bytes(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let mut o = Out(Vec::new());
    o.0.extend_from_slice(MAGIC);
    o.u32(VERSION);
    o.str(&cfg.to_text());
    o.u8(u8::from(state.model.trained));
    o.u64(state.epoch);
    o.0.extend_from_slice(&state.rng.get_seed());
    o.u64(state.rng.get_stream());
    o.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let store = &state.model.store;
    o.u64(store.len() as u64);
    for (name, t) in store.names().iter().zip(store.tensors()) {
        o.str(name);
        o.u64(t.shape().len() as u64);
        for &d in t.shape() {
            o.u64(d as u64);
        }
        o.floats(t);
    }
    let opt = &state.opt;
    let c = &opt.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.lr_decay] {
        o.f64(v);
    }
    o.u64(opt.step_count);
    o.u64(opt.epoch);
    for &s in &opt.lr_scale {
        o.f64(s);
    }
    for m in opt.first_moment.iter().chain(&opt.second_moment) {
        o.floats(m);
    }
    o.0
}

/// Parse a checkpoint. The model is rebuilt from the embedded config and
/// every stored block must match its name and shape.
pub fn from_bytes(buf: &[u8]) -> Result<(RunConfig, TrainState)> {
    let mut r = In { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DddmError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DddmError::Format(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let cfg = RunConfig::parse(&r.str("config")?)?;
    let mut model = Model::new(&cfg)?;
    model.trained = match r.u8("trained flag")? {
        0 => false,
        1 => true,
        v => return Err(DddmError::Format(format!("bad trained flag {v}"))),
    };
    let epoch = r.u64("epoch")?;
    let seed: [u8; 32] = r.array("rng seed")?;
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.array("rng position")?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let n = r.u64("block count")?;
    if n != model.store.len() as u64 {
        return Err(DddmError::Format(format!(
            "topology mismatch: checkpoint has {n} parameter blocks, config builds {}",
            model.store.len()
        )));
    }
    for i in 0..model.store.len() {
        let name = r.str("block name")?;
        let expected = &model.store.names()[i];
        if name != *expected {
            return Err(DddmError::Format(format!(
                "topology mismatch: block {i} is {name}, expected {expected}"
            )));
        }
        let rank = r.len("rank")?;
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let t = &mut model.store.tensors_mut()[i];
        if shape != t.shape() {
            return Err(DddmError::Format(format!(
                "topology mismatch: {name} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        r.fill(t, &name)?;
    }

    let mut c = [0.0; 6];
    for v in &mut c {
        *v = r.f64("optimizer config")?;
    }
    let mut opt = crate::tensor::AdamW::new(
        AdamWConfig {
            lr: c[0],
            beta1: c[1],
            beta2: c[2],
            eps: c[3],
            weight_decay: c[4],
            lr_decay: c[5],
        },
        &model.store,
    );
    opt.step_count = r.u64("step count")?;
    opt.epoch = r.u64("optimizer epoch")?;
    for s in &mut opt.lr_scale {
        *s = r.f64("lr scale")?;
    }
    for m in opt.first_moment.iter_mut().chain(opt.second_moment.iter_mut()) {
        r.fill(m, "optimizer moment")?;
    }
    if r.pos != buf.len() {
        return Err(DddmError::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok((cfg, TrainState { model, opt, rng, epoch }))
}

/// Write via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    write_atomic(path, &to_bytes(cfg, state))
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    from_bytes(&std::fs::read(path)?)
}
