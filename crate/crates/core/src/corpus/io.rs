//! `FBNK` feature files and the TSV corpus manifest.
//!
//! Feature layout (little-endian): magic `FBNK`, `u32` version, `u32` frame
//! count N, `u32` feature dim k, then N*k `f64` values row-major.
//! Manifest rows: id, feature path (relative to the manifest), target text,
//! domain, split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::Split;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"FBNK";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!(
            "features must be [N, k], got {s:?}"
        )));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("features contain non-finite values".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * features.numel());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(s[1] as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        }
        .into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let (n, k) = (word(8), word(12));
    let payload = (n as usize)
        .checked_mul(k as usize)
        .and_then(|c| c.checked_mul(8))
        .ok_or(FormatError::DimensionOverflow(n, k))?;
    if n == 0 || k == 0 {
        return Err(FormatError::Malformed(format!("empty feature matrix {n} x {k}")).into());
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(FormatError::Truncated {
            needed: payload,
            available: body.len(),
        }
        .into());
    }
    if body.len() > payload {
        return Err(
            FormatError::Malformed(format!("{} trailing bytes", body.len() - payload)).into(),
        );
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(vec![n as usize, k as usize], data)?)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    /// Resolved against the manifest's directory when read.
    pub features: PathBuf,
    pub target: String,
    pub domain: String,
    pub split: Split,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => FormatError::Malformed(format!("{}: {other:?}", path.display())).into(),
    }
}

/// Writes rows with feature paths relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        for field in [&r.id, &r.target, &r.domain] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::Invalid(format!(
                    "manifest field {field:?} contains a tab or newline"
                )));
            }
        }
        let rel = r.features.strip_prefix(base).unwrap_or(&r.features);
        let feat = rel.to_string_lossy();
        w.write_record([r.id.as_str(), &feat, &r.target, &r.domain, r.split.as_str()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 5 {
            return Err(FormatError::Malformed(format!(
                "{} line {}: expected 5 columns, found {}",
                path.display(),
                line + 1,
                rec.len()
            ))
            .into());
        }
        let id = rec[0].to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        rows.push(ManifestRow {
            id,
            features: base.join(&rec[1]),
            target: rec[2].to_string(),
            domain: rec[3].to_string(),
            split: rec[4].parse()?,
        });
    }
    Ok(rows)
}
