//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "VXCK" | u32 version
//! u32 len | run config as JSON
//! u64 completed epochs | u64 optimizer steps taken by the trainer
//! u64 sampler seed | u64 sampler stream (next epoch)
//! u32 tensors, then per tensor:
//!     u32 len | name | u32 rank | u64 dims... | f32 values
//! u64 adam step | per tensor: f32 first moments | f32 second moments
//! u32 history rows, then per row:
//!     u64 epoch | u64 steps | f64 train loss | u8 validated | f64 jaccard | f64 dsc
//! u8 has best | u64 best epoch | f64 best jaccard
//! ```
//!
//! Every field is written from exactly what was read, so loading a file and
//! saving it again reproduces it byte for byte.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One row of the per-epoch metric history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: u64,
    /// Optimizer steps taken during this epoch.
    pub steps: u64,
    pub train_loss: f64,
    /// Mean validation Jaccard and Dice, when validation ran this epoch.
    pub val: Option<(f64, f64)>,
}

/// Named parameter values.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub total_steps: u64,
    pub sampler_seed: u64,
    pub sampler_stream: u64,
    pub params: Vec<NamedTensor>,
    pub adam: AdamState<f32>,
    pub history: Vec<HistoryRow>,
    /// `(epoch, validation Jaccard)` of the best epoch so far.
    pub best: Option<(u64, f64)>,
}

impl Checkpoint {
    /// Parameter values copied out of a model.
    pub fn params_of(model: &Model<f32>) -> Vec<NamedTensor> {
        model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec()))
            .collect()
    }

    /// Rebuilds the model this checkpoint describes.
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_parameters(&self.config.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_string(&self.config).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        w.blob(json.as_bytes())?;
        w.u64(self.epoch);
        w.u64(self.total_steps);
        w.u64(self.sampler_seed);
        w.u64(self.sampler_stream);
        w.len(self.params.len())?;
        for (name, shape, data) in &self.params {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::shape("checkpoint", format!("`{name}` shape {shape:?} vs {} values", data.len())));
            }
            w.blob(name.as_bytes())?;
            w.len(shape.len())?;
            shape.iter().for_each(|&d| w.u64(d as u64));
            w.f32s(data);
        }
        let adam = &self.adam;
        if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
            return Err(Error::shape("checkpoint", "optimizer state does not match the parameter list"));
        }
        w.u64(adam.step);
        for ((m, v), p) in adam.m.iter().zip(&adam.v).zip(&self.params) {
            if m.len() != p.2.len() || v.len() != p.2.len() {
                return Err(Error::shape("checkpoint", format!("optimizer state for `{}` has the wrong size", p.0)));
            }
            w.f32s(m);
            w.f32s(v);
        }
        w.len(self.history.len())?;
        for row in &self.history {
            w.u64(row.epoch);
            w.u64(row.steps);
            w.f64(row.train_loss);
            let (flag, (j, d)) = match row.val {
                Some(v) => (1, v),
                None => (0, (0.0, 0.0)),
            };
            w.u8(flag);
            w.f64(j);
            w.f64(d);
        }
        let (flag, (e, j)) = match self.best {
            Some(b) => (1, b),
            None => (0, (0, 0.0)),
        };
        w.u8(flag);
        w.u64(e);
        w.f64(j);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let json = r.blob()?;
        let config: RunConfig =
            serde_json::from_slice(json).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let epoch = r.u64()?;
        let total_steps = r.u64()?;
        let sampler_seed = r.u64()?;
        let sampler_stream = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::Data("checkpoint: name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Data(format!("checkpoint: `{name}` is too large")))?;
            let data = r.f32s(numel)?;
            params.push((name, shape, data));
        }
        let step = r.u64()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for p in &params {
            m.push(r.f32s(p.2.len())?);
            v.push(r.f32s(p.2.len())?);
        }
        let rows = r.u32()? as usize;
        let mut history = Vec::with_capacity(rows.min(1 << 16));
        for _ in 0..rows {
            let epoch = r.u64()?;
            let steps = r.u64()?;
            let train_loss = r.f64()?;
            let flag = r.flag()?;
            let j = r.f64()?;
            let d = r.f64()?;
            history.push(HistoryRow { epoch, steps, train_loss, val: flag.then_some((j, d)) });
        }
        let flag = r.flag()?;
        let best_epoch = r.u64()?;
        let best_score = r.f64()?;
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("checkpoint: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            total_steps,
            sampler_seed,
            sampler_stream,
            params,
            adam: AdamState { step, m, v },
            history,
            best: flag.then_some((best_epoch, best_score)),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Data("checkpoint: count exceeds u32".into()))?;
        self.u32(n);
        Ok(())
    }
    fn blob(&mut self, b: &[u8]) -> Result<()> {
        self.len(b.len())?;
        self.bytes(b);
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(v.len() * 4);
        v.iter().for_each(|x| self.bytes(&x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.array::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Data(format!("checkpoint: invalid flag byte {b}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("checkpoint: tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }
}
