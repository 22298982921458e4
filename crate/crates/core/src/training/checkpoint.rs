//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian, all floats 32-bit little-endian
//! except the f64 best loss): magic `VMND`, version u32, config JSON
//! (u64 length + bytes), best epoch u64, best validation loss f64, then
//! length-prefixed named parameter and buffer blobs, then optional Adam
//! state. Loading validates every name and shape against the embedded
//! config and fails loudly on any mismatch.

use super::{AdamState, Result, TrainError};
use crate::nets::{NetConfig, Network};
use crate::tensor::{RunningStats, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMND";

type NamedBlobs = BTreeMap<String, (Vec<usize>, Vec<f32>)>;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    /// 1-based epoch whose weights these are ("last best model").
    pub epoch: u64,
    pub best_val_loss: f64,
    pub params: NamedBlobs,
    /// Running statistics flattened as `<bn>.running_mean` / `<bn>.running_var`.
    pub buffers: NamedBlobs,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, epoch: u64, best_val_loss: f64, optimizer: Option<AdamState>) -> Self {
        let params = net
            .params
            .iter()
            .map(|(k, t)| (k.clone(), (t.shape().to_vec(), t.as_slice().to_vec())))
            .collect();
        let mut buffers = BTreeMap::new();
        for (name, stats) in &net.buffers {
            buffers.insert(format!("{name}.running_mean"), (vec![stats.mean.len()], stats.mean.clone()));
            buffers.insert(format!("{name}.running_var"), (vec![stats.var.len()], stats.var.clone()));
        }
        Self { config: net.config.clone(), epoch, best_val_loss, params, buffers, optimizer }
    }

    /// Rebuild the network, validating parameters and buffers against
    /// `expected` (or the embedded config).
    pub fn restore_network(&self, expected: Option<&NetConfig>) -> Result<Network<f32>> {
        let config = expected.unwrap_or(&self.config);
        if let Some(exp) = expected {
            if *exp != self.config {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint was written for arch {:?}, loader expects {:?}",
                    self.config.arch_name(),
                    exp.arch_name()
                )));
            }
        }
        let params: BTreeMap<String, Tensor<f32>> = self
            .params
            .iter()
            .map(|(k, (shape, data))| Ok((k.clone(), Tensor::from_vec(shape.clone(), data.clone())?)))
            .collect::<Result<_>>()?;
        let mut buffers: BTreeMap<String, RunningStats<f32>> = BTreeMap::new();
        for (name, (_, data)) in &self.buffers {
            if let Some(base) = name.strip_suffix(".running_mean") {
                let var_name = format!("{base}.running_var");
                let var = self
                    .buffers
                    .get(&var_name)
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing buffer {var_name}")))?;
                buffers.insert(base.to_string(), RunningStats { mean: data.clone(), var: var.1.clone() });
            } else if !name.ends_with(".running_var") {
                return Err(TrainError::Checkpoint(format!("unrecognized buffer name {name}")));
            }
        }
        Ok(Network::from_parts(config.clone(), params, buffers)?)
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.out.extend_from_slice(b);
    }
    fn f32s(&mut self, data: &[f32]) {
        self.u64(data.len() as u64);
        for v in data {
            self.out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn named_blobs(&mut self, map: &NamedBlobs) {
        self.u64(map.len() as u64);
        for (name, (shape, data)) in map {
            self.bytes(name.as_bytes());
            self.u64(shape.len() as u64);
            for &d in shape {
                self.u64(d as u64);
            }
            self.f32s(data);
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer { out: Vec::new() };
    w.out.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config_json =
        serde_json::to_vec(&ckpt.config).map_err(|e| TrainError::Checkpoint(format!("config encode: {e}")))?;
    w.bytes(&config_json);
    w.u64(ckpt.epoch);
    w.f64(ckpt.best_val_loss);
    w.named_blobs(&ckpt.params);
    w.named_blobs(&ckpt.buffers);
    match &ckpt.optimizer {
        None => w.out.push(0),
        Some(state) => {
            w.out.push(1);
            w.u64(state.t);
            w.u64(state.m.len() as u64);
            for (name, m) in &state.m {
                w.bytes(name.as_bytes());
                w.f32s(m);
                let v = state.v.get(name).ok_or_else(|| {
                    TrainError::Checkpoint(format!("optimizer state missing second moment for {name}"))
                })?;
                w.f32s(v);
            }
        }
    }
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(&w.out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn sized_bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn named_blobs(&mut self) -> Result<NamedBlobs> {
        let count = self.u64()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(self.sized_bytes()?.to_vec())
                .map_err(|_| TrainError::Checkpoint("non-UTF8 blob name".into()))?;
            let ndim = self.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let data = self.f32s()?;
            map.insert(name, (shape, data));
        }
        Ok(map)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic, want VMND".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "version {version} needs migration; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let config: NetConfig = serde_json::from_slice(r.sized_bytes()?)
        .map_err(|e| TrainError::Checkpoint(format!("config decode: {e}")))?;
    let epoch = r.u64()?;
    let best_val_loss = r.f64()?;
    let params = r.named_blobs()?;
    let buffers = r.named_blobs()?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let count = r.u64()? as usize;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for _ in 0..count {
                let name = String::from_utf8(r.sized_bytes()?.to_vec())
                    .map_err(|_| TrainError::Checkpoint("non-UTF8 optimizer name".into()))?;
                m.insert(name.clone(), r.f32s()?);
                v.insert(name, r.f32s()?);
            }
            Some(AdamState { t, m, v })
        }
        other => return Err(TrainError::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    Ok(Checkpoint { config, epoch, best_val_loss, params, buffers, optimizer })
}
