//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! magic "SSATCKPT" | version u32 | config digest [32] | epoch u64 | seed u64 | dtype u8 (4 or 8)
//! param count u64, then per param:
//!   name len u32 | name utf-8 | layer id u64 | decay u8 | ndim u64 | dims u64.. | values
//! optimizer step u64, then first and second moments per param (values only)
//! sha256 of everything above [32]
//! ```
//!
//! Random streams are derived from `(seed, epoch, ...)`, so `seed` and
//! `epoch` are the whole generator state.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SSATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_digest: [u8; 32],
    /// Epochs completed.
    pub epoch: u64,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
}

fn put_values<T: Float>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Float>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_digest);
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(ck.params.len() as u64).to_le_bytes());
    for p in ck.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.layer_id as u64).to_le_bytes());
        out.push(u8::from(p.decay));
        out.extend_from_slice(&(p.value.ndim() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_values(&mut out, &p.value);
    }
    out.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    for t in ck.optimizer.m.iter().chain(&ck.optimizer.v) {
        put_values(&mut out, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("size overflows usize".into()))
    }

    fn values<T: Float>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let width = T::DTYPE.tag() as usize;
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
        Tensor::new(shape.to_vec(), raw.chunks_exact(width).map(T::read_le).collect())
    }
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("content digest mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let dtype = r.u8()?;
    if dtype != T::DTYPE.tag() {
        return Err(Error::CorruptCheckpoint(format!(
            "stored with {dtype}-byte values, requested {}",
            T::DTYPE.tag()
        )));
    }
    let count = r.usize()?;
    let mut params = ParamStore::new();
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not utf-8".into()))?
            .to_string();
        let layer_id = r.usize()?;
        let decay = r.u8()? != 0;
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let value = r.values(&shape)?;
        params.add(name, value, layer_id, decay);
        shapes.push(shape);
    }
    let step = r.u64()?;
    let m = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
    let v = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config_digest,
        epoch,
        seed,
        params,
        optimizer: OptimizerState { step, m, v },
    })
}

/// Writes through a temporary file and rename.
pub fn save_checkpoint<T: Float>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

/// Replaces `path` with `bytes` without leaving a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
