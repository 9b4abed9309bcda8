//! Embedding index with exact cosine scan.
//!
//! Vectors are L2-normalized when indexed so cosine similarity is a dot
//! product. Items whose embedding is the zero vector are stored as zeros and
//! never returned.
//!
//! `dense.vec` layout (little endian):
//!
//! ```text
//! magic "CRDV" | version u32 | dim u32 | count u32
//! count * dim f32 (row-major)
//! count * (len u32, utf-8 item id)
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::kb::{CodeKnowledgeItem, ItemId, ItemKind, KnowledgeBase};
use crate::rank::{top_k, Scored};
use crate::sparse;
use crate::wire::ClientError;

pub const DENSE_FILE: &str = "dense.vec";
const MAGIC: &[u8; 4] = b"CRDV";
const VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Text encoder.
pub trait EmbedderClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, ClientError>;
    fn dimension(&self) -> Result<usize, ClientError>;
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Deterministic token-hash bag projection: each identifier subtoken adds a
/// signed unit to a hashed coordinate.
#[derive(Debug, Clone, Copy)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
}

pub const STUB_DIM: usize = 64;
pub const STUB_SEED: u64 = 0x5eed_c0de_7a9b_0001;

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { dim: STUB_DIM, seed: STUB_SEED }
    }
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        StubEmbedder { dim, seed }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // Final avalanche so the sign bit depends on every byte.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

impl EmbedderClient for StubEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        let mut v = vec![0f32; self.dim];
        for tok in sparse::tokenize(text) {
            let h = fnv1a(self.seed, tok.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        Ok(v)
    }

    fn dimension(&self) -> Result<usize, ClientError> {
        Ok(self.dim)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("embedder unavailable after {embedded} of {total} items: {source}")]
    EmbedderUnavailable {
        embedded: usize,
        total: usize,
        #[source]
        source: ClientError,
    },
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dense index: {0}")]
    Format(String),
}

/// L2-normalizes in f64, returning the zero vector for zero or non-finite
/// input.
pub fn normalize(raw: &[f32]) -> Vec<f32> {
    let norm = raw.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// What gets embedded for an item: the whole body for functions and
/// methods, the assignment line(s) for variables. Both are the item text.
pub fn embedding_text(item: &CodeKnowledgeItem) -> &str {
    match item.kind {
        ItemKind::Function | ItemKind::ClassFunction => &item.text,
        ItemKind::GlobalVariable | ItemKind::ClassVariable => item.text.trim_end(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<ItemId>,
    /// Row-major, one unit (or zero) row per id.
    vectors: Vec<f32>,
}

impl DenseIndex {
    pub fn build(kb: &KnowledgeBase, embedder: &dyn EmbedderClient) -> Result<DenseIndex, DenseError> {
        Self::from_documents(
            kb.items.iter().map(|it| (it.id.clone(), embedding_text(it))).collect(),
            embedder,
        )
    }

    pub fn from_documents(docs: Vec<(ItemId, &str)>, embedder: &dyn EmbedderClient) -> Result<DenseIndex, DenseError> {
        let total = docs.len();
        let dim = embedder
            .dimension()
            .map_err(|source| DenseError::EmbedderUnavailable { embedded: 0, total, source })?;
        let embed_one = |(i, text): (usize, &&str)| -> Result<Vec<f32>, DenseError> {
            let raw = embedder
                .embed(text)
                .map_err(|source| DenseError::EmbedderUnavailable { embedded: i, total, source })?;
            if raw.len() != dim {
                return Err(DenseError::DimensionMismatch { expected: dim, got: raw.len() });
            }
            Ok(normalize(&raw))
        };
        let texts: Vec<&str> = docs.iter().map(|(_, t)| *t).collect();
        let rows: Vec<Vec<f32>> = if embedder.concurrent_safe() {
            texts.par_iter().enumerate().map(embed_one).collect::<Result<_, _>>()?
        } else {
            texts.iter().enumerate().map(embed_one).collect::<Result<_, _>>()?
        };
        Ok(DenseIndex {
            dim,
            ids: docs.into_iter().map(|(id, _)| id).collect(),
            vectors: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`j` items by cosine similarity with the embedded query. No score
    /// floor: orthogonal items are returned with score 0.
    pub fn retrieve(&self, query_text: &str, embedder: &dyn EmbedderClient, j: usize) -> Result<Vec<(ItemId, f64)>, DenseError> {
        let raw = embedder
            .embed(query_text)
            .map_err(|source| DenseError::EmbedderUnavailable { embedded: 0, total: 1, source })?;
        if raw.len() != self.dim {
            return Err(DenseError::DimensionMismatch { expected: self.dim, got: raw.len() });
        }
        Ok(self.retrieve_vector(&normalize(&raw), j))
    }

    pub fn retrieve_vector(&self, query: &[f32], j: usize) -> Vec<(ItemId, f64)> {
        let scored = (0..self.ids.len()).filter_map(|i| {
            let row = self.vector(i);
            if row.iter().all(|&x| x == 0.0) {
                return None;
            }
            Some(Scored { id: self.ids[i].clone(), score: dot(query, row) })
        });
        top_k(scored, j)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.vectors.len() * 4 + self.ids.len() * 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for x in &self.vectors {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.0.len() as u32).to_le_bytes());
            out.extend_from_slice(id.0.as_bytes());
        }
        out
    }

    /// Decodes an untrusted `dense.vec`, checking sizes and that every row is
    /// unit length or zero.
    pub fn from_bytes(bytes: &[u8]) -> Result<DenseIndex, DenseError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DenseError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DenseError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dim == 0 {
            return Err(DenseError::Format("zero dimension".into()));
        }
        let floats = dim
            .checked_mul(count)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| DenseError::Format("matrix larger than file".into()))?;
        let mut vectors = Vec::with_capacity(floats);
        for chunk in r.take(floats * 4)?.chunks_exact(4) {
            vectors.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let mut ids = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| DenseError::Format("id is not utf-8".into()))?;
            if !seen.insert(id.to_string()) {
                return Err(DenseError::Format(format!("duplicate id {id}")));
            }
            ids.push(ItemId(id.to_string()));
        }
        if r.remaining() != 0 {
            return Err(DenseError::Format("trailing bytes".into()));
        }
        let index = DenseIndex { dim, ids, vectors };
        for i in 0..count {
            let row = index.vector(i);
            let norm = l2_norm(row);
            if !(norm == 0.0 || (norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(DenseError::Format(format!("row {i} has norm {norm}")));
            }
        }
        Ok(index)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DenseError> {
        let path = dir.join(DENSE_FILE);
        fs::write(&path, self.to_bytes()).map_err(|source| DenseError::Io { path, source })
    }

    pub fn load(dir: &Path) -> Result<DenseIndex, DenseError> {
        let path = dir.join(DENSE_FILE);
        let bytes = fs::read(&path).map_err(|source| DenseError::Io { path, source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DenseError> {
        if n > self.remaining() {
            return Err(DenseError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DenseError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
