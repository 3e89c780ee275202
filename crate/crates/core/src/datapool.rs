//! Retrieval store of (audio features, translation) pairs.
//!
//! Each entry is keyed by a pooled vector: the time-sum of either the raw
//! feature frames or the generic model's encoder states. Retrieval is an
//! exhaustive cosine scan with a similarity threshold and a top-n cut.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_features, read_manifest, ManifestRow};
use crate::error::{Error, FormatError, Result};
use crate::model::STModel;
use crate::tensor::{kernels, Tensor};

pub const POOL_MAGIC: [u8; 4] = *b"POOL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Raw,
    Encoder,
}

impl std::str::FromStr for KeyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(KeyKind::Raw),
            "encoder" => Ok(KeyKind::Encoder),
            other => Err(Error::Invalid(format!("unknown key kind {other:?}"))),
        }
    }
}

/// Column-wise sum over the time axis of `[N, d]` frames.
pub fn pool_vector(frames: &Tensor) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("expected [N, d] frames, got {s:?}")));
    }
    let d = s[1];
    let mut z = vec![0.0; d];
    for row in frames.data().chunks_exact(d) {
        z.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(z)
}

fn norm(a: &[f64]) -> f64 {
    kernels::dot(a, a).sqrt()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    kernels::dot(a, b) / (na * nb)
}

/// `a.b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub domain: String,
    pub translation: String,
    /// Source features used for adaptation.
    pub features: Arc<Tensor>,
    /// Frames the key was pooled from; absent when reloaded from disk.
    pub key_frames: Option<Tensor>,
    pub z: Vec<f64>,
    norm: f64,
}

/// Input record for [`Pool::build`].
#[derive(Debug, Clone)]
pub struct PoolItem {
    pub id: String,
    pub domain: String,
    pub translation: String,
    pub features: Arc<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    /// Position of the entry in the pool.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// On-disk descriptor pointing at the manifest and the pooled-vector sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDescriptor {
    pub manifest: PathBuf,
    pub key_kind: KeyKind,
    pub sidecar: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    key_kind: KeyKind,
    dim: usize,
    entries: Vec<PoolEntry>,
}

impl Pool {
    pub fn empty(key_kind: KeyKind, dim: usize) -> Self {
        Pool {
            key_kind,
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds keys for `items`. Encoder keys need `model` and are computed in
    /// eval mode.
    pub fn build(items: Vec<PoolItem>, key_kind: KeyKind, model: Option<&STModel>) -> Result<Self> {
        let model = match (key_kind, model) {
            (KeyKind::Encoder, None) => {
                return Err(Error::Config("encoder keys require a model".into()))
            }
            (_, m) => m,
        };
        let dim = match key_kind {
            KeyKind::Raw => items.first().map_or(0, |i| i.features.shape()[1]),
            KeyKind::Encoder => model.expect("checked").config().d_model,
        };
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(items.len());
        for item in items {
            if !seen.insert(item.id.clone()) {
                return Err(Error::DuplicateId(item.id));
            }
            let key_frames = match key_kind {
                KeyKind::Raw => (*item.features).clone(),
                KeyKind::Encoder => model.expect("checked").encode(&item.features)?.states,
            };
            let z = pool_vector(&key_frames)?;
            if z.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: z.len(),
                });
            }
            let n = norm(&z);
            if n == 0.0 {
                log::warn!(
                    "pool entry {} has a zero key vector and will never be retrieved",
                    item.id
                );
            }
            entries.push(PoolEntry {
                id: item.id,
                domain: item.domain,
                translation: item.translation,
                features: item.features,
                key_frames: Some(key_frames),
                z,
                norm: n,
            });
        }
        Ok(Pool {
            key_kind,
            dim,
            entries,
        })
    }

    /// Builds from pre-computed pooled vectors (no key frames).
    pub fn from_vectors(
        key_kind: KeyKind,
        dim: usize,
        items: Vec<(PoolItem, Vec<f64>)>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(items.len());
        for (item, z) in items {
            if !seen.insert(item.id.clone()) {
                return Err(Error::DuplicateId(item.id));
            }
            if z.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: z.len(),
                });
            }
            entries.push(PoolEntry {
                norm: norm(&z),
                id: item.id,
                domain: item.domain,
                translation: item.translation,
                features: item.features,
                key_frames: None,
                z,
            });
        }
        Ok(Pool {
            key_kind,
            dim,
            entries,
        })
    }

    /// Loads every manifest row's features and builds keys.
    pub fn from_manifest(
        rows: &[ManifestRow],
        key_kind: KeyKind,
        model: Option<&STModel>,
    ) -> Result<Self> {
        let items = rows
            .iter()
            .map(|r| {
                Ok(PoolItem {
                    id: r.id.clone(),
                    domain: r.domain.clone(),
                    translation: r.target.clone(),
                    features: Arc::new(read_features(&r.features)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dim_hint = model.map_or(0, |m| m.config().d_model);
        if items.is_empty() {
            return Ok(Pool::empty(key_kind, dim_hint));
        }
        Pool::build(items, key_kind, model)
    }

    pub fn key_kind(&self) -> KeyKind {
        self.key_kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &PoolEntry {
        &self.entries[index]
    }

    /// Query key for `features` matching this pool's key kind.
    pub fn query_key(&self, features: &Tensor, model: Option<&STModel>) -> Result<Vec<f64>> {
        match self.key_kind {
            KeyKind::Raw => pool_vector(features),
            KeyKind::Encoder => {
                let m =
                    model.ok_or_else(|| Error::Config("encoder keys require a model".into()))?;
                pool_vector(&m.encode(features)?.states)
            }
        }
    }

    /// Every entry with cosine >= `tau`, best first (ties by ascending id),
    /// at most `n`. An entry whose id equals `exclude` is skipped.
    pub fn retrieve(
        &self,
        query_z: &[f64],
        tau: f64,
        n: usize,
        exclude: Option<&str>,
    ) -> Result<RetrievalResult> {
        if self.entries.is_empty() {
            return Ok(RetrievalResult {
                query_id: exclude.map(str::to_string),
                hits: Vec::new(),
            });
        }
        if query_z.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query_z.len(),
            });
        }
        let qn = norm(query_z);
        if qn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut hits = Vec::new();
        for (index, e) in self.entries.iter().enumerate() {
            if exclude == Some(e.id.as_str()) {
                continue;
            }
            if e.norm == 0.0 {
                log::warn!("skipping pool entry {} with a zero key vector", e.id);
                continue;
            }
            let score = cosine_with_norms(query_z, qn, &e.z, e.norm);
            if score >= tau {
                hits.push(Hit {
                    id: e.id.clone(),
                    score,
                    index,
                });
            }
        }
        sort_hits(&mut hits);
        hits.truncate(n);
        Ok(RetrievalResult {
            query_id: exclude.map(str::to_string),
            hits,
        })
    }

    /// The entry with the lowest cosine to the query.
    pub fn least_similar(&self, query_z: &[f64], exclude: Option<&str>) -> Result<Option<Hit>> {
        let all = self.retrieve(query_z, f64::NEG_INFINITY, usize::MAX, exclude)?;
        Ok(all.hits.into_iter().last())
    }

    /// Encodes the pooled vectors as a `POOL` sidecar: magic, `u32` count,
    /// `u32` dim, then per entry a `u32` id length, the id bytes and `dim`
    /// little-endian `f64`s.
    pub fn encode_sidecar(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&POOL_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.id.as_bytes());
            for v in &e.z {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Writes `<path>` (JSON descriptor) and `<path>.vec` (sidecar).
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        manifest: impl AsRef<Path>,
    ) -> Result<PoolDescriptor> {
        let path = path.as_ref();
        let sidecar = PathBuf::from(format!("{}.vec", path.display()));
        fs::write(&sidecar, self.encode_sidecar()).map_err(|e| Error::io(&sidecar, e))?;
        let manifest = manifest.as_ref();
        let desc = PoolDescriptor {
            manifest: fs::canonicalize(manifest).map_err(|e| Error::io(manifest, e))?,
            key_kind: self.key_kind,
            sidecar: fs::canonicalize(&sidecar).map_err(|e| Error::io(&sidecar, e))?,
        };
        fs::write(path, serde_json::to_vec_pretty(&desc)?).map_err(|e| Error::io(path, e))?;
        Ok(desc)
    }

    /// Reloads a saved pool; features come from the manifest's feature files.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let desc: PoolDescriptor = serde_json::from_slice(&text)?;
        let bytes = fs::read(&desc.sidecar).map_err(|e| Error::io(&desc.sidecar, e))?;
        let (dim, vectors) = decode_sidecar(&bytes)?;
        let rows: BTreeMap<String, ManifestRow> = read_manifest(&desc.manifest)?
            .into_iter()
            .map(|r| (r.id.clone(), r))
            .collect();
        let items = vectors
            .into_iter()
            .map(|(id, z)| {
                let row = rows.get(&id).ok_or_else(|| {
                    Error::Invalid(format!("pool entry {id} is not in the manifest"))
                })?;
                Ok((
                    PoolItem {
                        id,
                        domain: row.domain.clone(),
                        translation: row.target.clone(),
                        features: Arc::new(read_features(&row.features)?),
                    },
                    z,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Pool::from_vectors(desc.key_kind, dim, items)
    }
}

/// Descending score, then ascending id.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Key dimension and the (id, key) pairs of a sidecar.
pub type SidecarContents = (usize, Vec<(String, Vec<f64>)>);

pub fn decode_sidecar(bytes: &[u8]) -> Result<SidecarContents> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != POOL_MAGIC {
        return Err(FormatError::BadMagic {
            expected: POOL_MAGIC,
            found: magic,
        }
        .into());
    }
    let count = c.u32()?;
    let dim = c.u32()?;
    let row_bytes = (dim as usize)
        .checked_mul(8)
        .ok_or(FormatError::DimensionOverflow(count, dim))?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let id = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| FormatError::Malformed("pool id is not UTF-8".into()))?;
        let z = c
            .take(row_bytes)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((id, z));
    }
    if c.pos != bytes.len() {
        return Err(
            FormatError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)).into(),
        );
    }
    Ok((dim as usize, out))
}
