//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MKS2" | u32 version | u64 arch hash | u8 stage | u64 step | u64 seed
//! u32 len, model config JSON | u32 len, run config text
//! u32 n_tensors, then per tensor:
//!     u16 len, name | u8 dtype | u8 trainable | u8 ndim | u64 dims… | f32 data…
//! u8 has_optimizer, then optionally:
//!     f32 lr, beta1, beta2, eps | u64 t | u32 n, then per entry:
//!     u16 len, name | u64 len | f32 m… | f32 v…
//! 32-byte SHA-256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, Stage};
use crate::tensor::{AdamConfig, AdamState, Moments, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MKS2";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DIGEST_LEN: usize = 32;

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub stage: Stage,
    /// Optimizer steps taken in `stage`.
    pub step: u64,
    /// Seed of the data order for `stage`.
    pub seed: u64,
    /// Effective run configuration, echoed verbatim.
    pub run_config: String,
}

impl TrainState {
    pub fn fresh(model: Model, seed: u64) -> Self {
        Self {
            model,
            optimizer: None,
            stage: Stage::Stage1,
            step: 0,
            seed,
            run_config: String::new(),
        }
    }
}

fn stage_tag(s: Stage) -> u8 {
    match s {
        Stage::Stage1 => 0,
        Stage::Stage2 => 1,
        Stage::VmnFinetune => 2,
    }
}

fn tag_stage(t: u8) -> Result<Stage> {
    match t {
        0 => Ok(Stage::Stage1),
        1 => Ok(Stage::Stage2),
        2 => Ok(Stage::VmnFinetune),
        _ => Err(Error::Truncated(format!("unknown stage tag {t}"))),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("ran out of bytes reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Truncated(format!("{what} is not UTF-8")))
    }
    fn name(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        self.utf8(n, what)
    }
    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        self.utf8(n, what)
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let cfg = &state.model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(cfg.arch_hash());
    w.u8(stage_tag(state.stage));
    w.u64(state.step);
    w.u64(state.seed);
    w.text(&serde_json::to_string(cfg).expect("config serializes"));
    w.text(&state.run_config);
    w.u32(state.model.params.len() as u32);
    for (name, entry) in state.model.params.iter() {
        w.name(name);
        w.u8(DTYPE_F32);
        w.u8(entry.trainable as u8);
        let shape = entry.tensor.shape();
        w.u8(shape.len() as u8);
        for &d in shape {
            w.u64(d as u64);
        }
        w.f32s(entry.tensor.data());
    }
    match &state.optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            let c = opt.config;
            w.f32s(&[c.lr, c.beta1, c.beta2, c.eps]);
            w.u64(opt.steps());
            w.u32(opt.moments().len() as u32);
            for (name, m) in opt.moments() {
                w.name(name);
                w.u64(m.m.len() as u64);
                w.f32s(&m.m);
                w.f32s(&m.v);
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

/// How strictly to check the stored architecture against the caller's.
#[derive(Clone, Copy, Debug)]
pub enum HashCheck<'a> {
    Expect(&'a ModelConfig),
    /// Accept whatever architecture the file holds.
    Override,
}

pub fn from_bytes(bytes: &[u8], check: HashCheck, with_optimizer: bool) -> Result<TrainState> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing format version".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::Truncated("file shorter than its header".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Truncated("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hash = r.u64("config hash")?;
    if let HashCheck::Expect(cfg) = check {
        if cfg.arch_hash() != hash {
            return Err(Error::ConfigHashMismatch {
                found: hash,
                expected: cfg.arch_hash(),
            });
        }
    }
    let stage = tag_stage(r.u8("stage")?)?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let cfg_text = r.text("model config")?;
    let config: ModelConfig =
        serde_json::from_str(&cfg_text).map_err(|e| Error::Truncated(format!("model config: {e}")))?;
    if config.arch_hash() != hash {
        return Err(Error::Truncated("stored config does not match stored hash".into()));
    }
    let run_config = r.text("run config")?;

    let specs = param_specs(&config);
    let n = r.u32("tensor count")? as usize;
    if n != specs.len() {
        return Err(Error::Truncated(format!("{n} tensors, architecture has {}", specs.len())));
    }
    let mut b = ParamStore::builder();
    let mut trainable = Vec::new();
    for _ in 0..n {
        let name = r.name("tensor name")?;
        if r.u8("dtype")? != DTYPE_F32 {
            return Err(Error::Truncated(format!("{name}: unknown dtype")));
        }
        let tr = r.u8("trainable flag")? != 0;
        let ndim = r.u8("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f32s(numel, "tensor data")?;
        if !specs.iter().any(|s| s.name == name && s.shape == shape) {
            return Err(Error::Truncated(format!("unexpected tensor {name} {shape:?}")));
        }
        if tr {
            trainable.push(name.clone());
        }
        b.add(name, Tensor::new(shape, data)?)?;
    }
    let mut params = b.build();
    params.set_trainable(|n| trainable.iter().any(|t| t == n));

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let c = r.f32s(4, "optimizer config")?;
            let config = AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            };
            let t = r.u64("optimizer step")?;
            let n = r.u32("moment count")? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..n {
                let name = r.name("moment name")?;
                let len = r.u64("moment length")? as usize;
                let m = r.f32s(len, "first moment")?;
                let v = r.f32s(len, "second moment")?;
                moments.insert(name, Moments { m, v });
            }
            Some(AdamState::from_parts(config, t, moments))
        }
        f => return Err(Error::Truncated(format!("optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Truncated("trailing bytes".into()));
    }
    Ok(TrainState {
        model: Model { config, params },
        optimizer: if with_optimizer { optimizer } else { None },
        stage,
        step,
        seed,
        run_config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, check: HashCheck) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, check, true)
}

/// Model weights only; optimizer state is skipped.
pub fn load_model(path: &Path, check: HashCheck) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes, check, false)?.model)
}
