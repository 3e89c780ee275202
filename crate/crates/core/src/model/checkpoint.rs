//! `STMC` checkpoint container.
//!
//! Layout (little-endian): magic `STMC`, `u32` version, `u32` config length,
//! config JSON, `u32` block count, then per block a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u32` extents and the `f64` payload.
//! Batch-norm running statistics are stored as `<name>.running_mean` and
//! `<name>.running_var` blocks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelConfig, STModel};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{RunningStats, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STMC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a model to bytes.
pub fn encode_checkpoint(model: &STModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    put_u32(
        &mut buf,
        (model.params().len() + 2 * model.bn_stats().len()) as u32,
    );
    for (name, t) in model.params() {
        put_block(&mut buf, name, t.shape(), t.data());
    }
    for (name, s) in model.bn_stats() {
        put_block(
            &mut buf,
            &format!("{name}{MEAN_SUFFIX}"),
            &[s.mean.len()],
            &s.mean,
        );
        put_block(
            &mut buf,
            &format!("{name}{VAR_SUFFIX}"),
            &[s.var.len()],
            &s.var,
        );
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &STModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| FormatError::Malformed("payload size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<STModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let count = r.u32()?;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| FormatError::Malformed("block name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()?;
            numel = numel
                .checked_mul(d as usize)
                .ok_or(FormatError::DimensionOverflow(numel as u32, d))?;
            shape.push(d as usize);
        }
        let data = r.f64s(numel)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| FormatError::Malformed(format!("block {name}: {e}")))?;
        blocks.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(
            FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into(),
        );
    }

    let mut params = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for (name, t) in blocks {
        if let Some(base) = name.strip_suffix(MEAN_SUFFIX) {
            means.insert(base.to_string(), t.into_data());
        } else if let Some(base) = name.strip_suffix(VAR_SUFFIX) {
            vars.insert(base.to_string(), t.into_data());
        } else {
            params.insert(name, t.with_grad());
        }
    }
    let mut bn = BTreeMap::new();
    for (name, mean) in means {
        let var = vars
            .remove(&name)
            .ok_or_else(|| FormatError::Malformed(format!("{name} lacks running variance")))?;
        bn.insert(
            name,
            RunningStats {
                mean,
                var,
                initialized: true,
            },
        );
    }
    if let Some(name) = vars.keys().next() {
        return Err(FormatError::Malformed(format!("{name} lacks running mean")).into());
    }
    STModel::from_parts(config, params, bn)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<STModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
