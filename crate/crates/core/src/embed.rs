//! Query and example embeddings.
//!
//! Vectors are held in memory as `f64`. Two file formats are supported:
//!
//! * binary: an 8-byte magic `DICLEMB1`, then `dim: u64` and `count: u64`,
//!   followed by `count` records of `id: u64` and `dim` × `f32`, all
//!   little-endian;
//! * JSONL: one `{"id": int, "vector": [float, ...]}` object per line.
//!
//! JSONL round-trips `f64` values exactly; the binary format stores `f32`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"DICLEMB1";

/// A finite, non-empty vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Validation("embedding must have dimension >= 1".into()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("embedding has a non-finite component".into()));
        }
        Ok(Embedding(vector))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Id-indexed embeddings of a single dimension, ids kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (u64, Vec<f64>)>) -> Result<Self> {
        let mut entries: Vec<(u64, Vec<f64>)> = entries.into_iter().collect();
        entries.sort_by_key(|(id, _)| *id);
        let mut store = EmbeddingStore::new(dim)?;
        store.ids.reserve(entries.len());
        store.data.reserve(entries.len() * dim);
        for (i, (id, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: Some(id),
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(id));
            }
            if i > 0 && store.ids[i - 1] == id {
                return Err(Error::DuplicateId(id));
            }
            store.ids.push(id);
            store.data.extend_from_slice(&v);
        }
        Ok(store)
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

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        let i = self.ids.binary_search(&id).ok()?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn embedding(&self, id: u64) -> Result<Embedding> {
        self.get(id)
            .map(|v| Embedding(v.to_vec()))
            .ok_or(Error::MissingId(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> + '_ {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    /// Store holding only the given ids.
    pub fn restrict(&self, ids: impl IntoIterator<Item = u64>) -> Result<Self> {
        let entries = ids
            .into_iter()
            .map(|id| self.get(id).map(|v| (id, v.to_vec())).ok_or(Error::MissingId(id)))
            .collect::<Result<Vec<_>>>()?;
        EmbeddingStore::from_entries(self.dim, entries)
    }

    /// Store for exactly the examples of `d`.
    pub fn restrict_to(&self, d: &Dataset) -> Result<Self> {
        self.restrict(d.ids())
    }

    /// Merge another store into this one. Dimensions must agree and ids must
    /// not collide.
    pub fn extend(&mut self, other: &EmbeddingStore) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                id: None,
                expected: self.dim,
                found: other.dim,
            });
        }
        let merged = EmbeddingStore::from_entries(
            self.dim,
            self.iter()
                .chain(other.iter())
                .map(|(id, v)| (id, v.to_vec()))
                .collect::<Vec<_>>(),
        )?;
        *self = merged;
        Ok(())
    }

    /// Error unless the store's ids are exactly the dataset's ids.
    /// Shift every id by `offset`.
    pub fn with_id_offset(mut self, offset: u64) -> Result<Self> {
        for id in &mut self.ids {
            *id = id
                .checked_add(offset)
                .ok_or_else(|| Error::Validation(format!("id {id} + {offset} overflows")))?;
        }
        Ok(self)
    }

    pub fn check_bound(&self, d: &Dataset) -> Result<()> {
        if self.len() != d.len() {
            return Err(Error::Binding(format!(
                "store has {} entries, dataset has {} examples",
                self.len(),
                d.len()
            )));
        }
        for (s, e) in self.ids.iter().zip(d.ids()) {
            if *s != e {
                return Err(Error::Binding(format!(
                    "store id {s} does not match dataset id {e}"
                )));
            }
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, v) in self.iter() {
            let line = serde_json::to_string(&JsonRecord {
                id,
                vector: v.to_vec(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(BINARY_MAGIC)?;
        put(&(self.dim as u64).to_le_bytes())?;
        put(&(self.len() as u64).to_le_bytes())?;
        for (id, v) in self.iter() {
            put(&id.to_le_bytes())?;
            for x in v {
                put(&(*x as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: u64,
    vector: Vec<f64>,
}

/// Load a binary or JSONL embedding file; the format is detected from the
/// leading magic bytes.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        load_binary(path, &bytes)
    } else {
        load_jsonl(path, &bytes)
    }
}

fn load_binary(path: &Path, bytes: &[u8]) -> Result<EmbeddingStore> {
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    let mut r = &bytes[BINARY_MAGIC.len()..];
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |r: &mut &[u8]| -> Result<u64> {
        r.read_exact(&mut u64_buf).map_err(|_| bad("truncated binary embedding file"))?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let dim = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let record_len = 8 + 4 * dim;
    if r.len() != count.saturating_mul(record_len) {
        return Err(bad("binary embedding file length does not match header"));
    }
    let entries = r.chunks_exact(record_len).map(|rec| {
        let id = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let v = rec[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        (id, v)
    });
    EmbeddingStore::from_entries(dim, entries.collect::<Vec<_>>())
}

fn load_jsonl(path: &Path, bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut entries = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(rec.vector.len());
        if rec.vector.len() != expected {
            return Err(Error::DimensionMismatch {
                id: Some(rec.id),
                expected,
                found: rec.vector.len(),
            });
        }
        entries.push((rec.id, rec.vector));
    }
    let dim = dim.ok_or_else(|| Error::Validation(format!("{}: no embeddings", path.display())))?;
    EmbeddingStore::from_entries(dim, entries)
}

/// Anything that maps text to a fixed-dimension embedding.
pub trait Encoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Embedding>;
}

/// Signed feature hashing of character 2- and 3-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Validation(format!("hash encoder needs dim >= 2, got {dim}")));
        }
        Ok(HashEncoder { dim, seed })
    }
}

impl Encoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        hash_encode(text, self.dim, self.seed)
    }
}

// FNV-1a, seeded through the offset basis.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // Final avalanche so low bits (bucket) and the top bit (sign) are independent.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Hash character 2- and 3-grams of `<text>` into `dim` signed buckets and
/// L2-normalize. The angle brackets mark word boundaries so short texts still
/// produce n-grams.
pub fn hash_encode(text: &str, dim: usize, seed: u64) -> Result<Embedding> {
    if dim < 2 {
        return Err(Error::Validation(format!("hash encoder needs dim >= 2, got {dim}")));
    }
    if text.is_empty() {
        return Err(Error::Validation("cannot encode empty text: zero vector".into()));
    }
    let chars: Vec<char> = std::iter::once('<')
        .chain(text.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut v = vec![0.0f64; dim];
    let mut buf = String::new();
    for n in [2usize, 3] {
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let h = fnv1a(seed ^ n as u64, buf.as_bytes());
            let bucket = (h % dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Validation(format!(
            "hashed features of {text:?} cancel to the zero vector"
        )));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Embedding::new(v)
}

/// Encode every example of `d`. Runs in parallel; the result does not depend
/// on scheduling.
pub fn encode_dataset<E: Encoder>(d: &Dataset, encoder: &E) -> Result<EmbeddingStore> {
    let entries = d
        .examples()
        .par_iter()
        .map(|ex| encoder.encode(&ex.text).map(|e| (ex.id, e.into_inner())))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::from_entries(encoder.dim(), entries)
}
