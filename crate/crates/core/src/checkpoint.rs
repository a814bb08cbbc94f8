//! Binary checkpoints of named parameter tensors.
//!
//! Layout, all integers `u32` little-endian:
//! `"LPAN"`, version, descriptor length, descriptor bytes, entry count, then
//! per entry: name length, name bytes, rank, dims, and the values as `f64`
//! little-endian in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: ParamSet,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("size fits in u32")).to_le_bytes());
}

pub fn encode(descriptor: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, descriptor.len());
    out.extend_from_slice(descriptor.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let descriptor = r.text("descriptor")?;
    let count = r.u32("entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.text("entry name")?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or(CheckpointError::Truncated("values"))?;
        let raw = r.take(numel * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        params
            .insert(name.clone(), t)
            .map_err(|_| CheckpointError::Malformed(format!("duplicate entry `{name}`")))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { descriptor, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(&model.descriptor(), &model.params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Loads a checkpoint into `spec`, refusing a different architecture.
pub fn load_model(path: &Path, spec: &ModelSpec) -> Result<Model> {
    let ck = load(path)?;
    let expected = spec.descriptor();
    if ck.descriptor != expected {
        return Err(CheckpointError::DescriptorMismatch {
            expected,
            found: ck.descriptor,
        }
        .into());
    }
    Model::from_params(spec.clone(), ck.params)
}
