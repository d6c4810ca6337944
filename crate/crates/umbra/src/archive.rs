//! Binary weight archives (`FNWT`) and training checkpoints (`FNWT` followed
//! by an `FNCK` optimizer section).
//!
//! All integers and floats are little-endian. A weight archive is
//!
//! ```text
//! "FNWT" u32 version
//! u32 config_len, config JSON
//! u32 arrays
//!   u32 name_len, name, u32 rank, rank × u32 dims, f32 data (row-major)
//! ```
//!
//! A checkpoint appends
//!
//! ```text
//! "FNCK" u32 version
//! u64 step, u64 epoch
//! u32 settings_len, training settings JSON
//! f64 beta1, f64 beta2, f64 eps, u64 adam_step
//! u32 arrays, per array: u32 len, len × f32 m, len × f32 v
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Batch composition and noise are pure functions of `(seed, step)`, so the
//! step counter together with the seed in the settings is the whole random
//! state.

use std::fs;
use std::path::Path;

use umbra_core::autodiff::{AdamState, ParamStore, Shape, Tensor};
use umbra_core::model::{ModelConfig, ShadowNet};
use umbra_core::training::TrainSettings;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"FNWT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FNCK";
pub const WEIGHTS_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn blob(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}
fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes every parameter of `net` (posterior branch included).
pub fn encode_weights(net: &ShadowNet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    put_blob(&mut out, &serde_json::to_vec(net.config()).expect("config serializes"));
    put_u32(&mut out, net.params.len() as u32);
    for p in net.params.iter() {
        put_blob(&mut out, p.name.as_bytes());
        put_u32(&mut out, p.dims.len() as u32);
        for &d in &p.dims {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, p.value.data());
    }
    out
}

fn read_weights(r: &mut Reader) -> std::result::Result<std::result::Result<ShadowNet<f32>, umbra_core::Error>, String> {
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err("bad magic (not a weight archive)".into());
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(format!("unsupported weight archive version {version}"));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob()?).map_err(|e| format!("config: {e}"))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.blob()?).map_err(|_| "array name is not UTF-8")?.to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let data = r.f32s(len)?;
        let value = Tensor::new(Shape::new(1, 1, 1, len), data).map_err(|e| e.to_string())?;
        params.push(name, dims, value);
    }
    Ok(ShadowNet::from_params(config, params))
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ShadowNet<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let net = read_weights(&mut r).map_err(|m| Error::format(path, m))??;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after weight archive"));
    }
    Ok(net)
}

pub fn save_weights(net: &ShadowNet<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_weights(net))
}

pub fn load_weights(path: &Path) -> Result<ShadowNet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Everything needed to continue a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: ShadowNet<f32>,
    pub adam: AdamState<f32>,
    pub settings: TrainSettings,
    pub step: u64,
    pub epoch: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = encode_weights(&ck.net);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    put_blob(&mut out, &serde_json::to_vec(&ck.settings).expect("settings serialize"));
    for v in [ck.adam.beta1, ck.adam.beta2, ck.adam.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ck.adam.step.to_le_bytes());
    put_u32(&mut out, ck.adam.m.len() as u32);
    for (m, v) in ck.adam.m.iter().zip(&ck.adam.v) {
        put_u32(&mut out, m.len() as u32);
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

/// Parses a checkpoint. Nothing is returned unless the checksum, both
/// sections and all shapes check out.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::format(path, "checksum mismatch (corrupted checkpoint)"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let parsed = (|| -> std::result::Result<_, String> {
        let net = read_weights(&mut r)?;
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("missing optimizer section".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let settings: TrainSettings = serde_json::from_slice(r.blob()?).map_err(|e| format!("settings: {e}"))?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            m.push(r.f32s(len)?);
            v.push(r.f32s(len)?);
        }
        if r.pos != body.len() {
            return Err("trailing bytes in optimizer section".into());
        }
        Ok((net, step, epoch, settings, beta1, beta2, eps, adam_step, m, v))
    })();
    let (net, step, epoch, settings, beta1, beta2, eps, adam_step, m, v) = parsed.map_err(|msg| Error::format(path, msg))?;
    let net = net?;
    let adam = AdamState {
        beta1,
        beta2,
        eps,
        step: adam_step,
        m,
        v,
        schedule: settings.schedule()?,
    };
    if !adam.matches(&net.params) {
        return Err(Error::format(path, "optimizer moments do not match the network"));
    }
    Ok(Checkpoint {
        net,
        adam,
        settings,
        step,
        epoch,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
