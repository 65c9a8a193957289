//! Frozen embedding vectors keyed by image ID, plus the `CSEM` file format.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "CSEM" | version u32 (=1) | count u32 | dim u32 | count × id u64 | count × dim × f32 (row-major)
//! ```
//!
//! Components are stored as `f32` and widened to `f64` on load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::DEFAULT_NORM_EPS;
use crate::error::{Error, Result};
use crate::linalg;

pub type ImageId = u64;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CSEM";
pub const EMBEDDING_VERSION: u32 = 1;
/// Bytes before the ID block.
pub const EMBEDDING_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<ImageId>,
    vectors: Vec<f64>,
    index: HashMap<ImageId, usize>,
}

impl EmbeddingStore {
    /// Build a store from IDs and a row-major `ids.len() × dim` matrix.
    pub fn new(dim: usize, ids: Vec<ImageId>, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::validation(format!(
                "expected {} components for {} vectors of dim {dim}, got {}",
                ids.len() * dim,
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite component in vector for id {}",
                ids[pos / dim]
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::validation(format!("duplicate image id {id}")));
            }
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            index,
        })
    }

    /// Convenience constructor from `(id, vector)` pairs.
    pub fn from_rows<I, V>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ImageId, V)>,
        V: AsRef<[f64]>,
    {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for (id, v) in rows {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::validation(format!(
                    "vector for id {id} has length {}, expected {dim}",
                    v.len()
                )));
            }
            ids.push(id);
            vectors.extend_from_slice(v);
        }
        Self::new(dim, ids, vectors)
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

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn get(&self, id: ImageId) -> Option<&[f64]> {
        self.index
            .get(&id)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn lookup(&self, id: ImageId) -> Result<&[f64]> {
        self.get(id).ok_or(Error::MissingId(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[f64])> + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.vectors.chunks_exact(self.dim))
    }

    /// Encode into the `CSEM` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.len())
            .map_err(|_| Error::validation("too many vectors for a u32 count"))?;
        let dim =
            u32::try_from(self.dim).map_err(|_| Error::validation("dimension exceeds u32"))?;
        let mut buf =
            Vec::with_capacity(EMBEDDING_HEADER_LEN + self.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        buf.extend_from_slice(&count.to_le_bytes());
        buf.extend_from_slice(&dim.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for &v in &self.vectors {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(buf)
    }

    /// Decode from the `CSEM` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(Error::Corruption(format!(
                "file is {} bytes, shorter than the {EMBEDDING_HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(Error::Format("bad magic, expected CSEM".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        if dim == 0 {
            return Err(Error::Format("dimension field is zero".into()));
        }
        let expected = count
            .checked_mul(8 + 4 * dim)
            .and_then(|n| n.checked_add(EMBEDDING_HEADER_LEN))
            .ok_or_else(|| Error::Corruption("header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Corruption(format!(
                "header declares {count} vectors of dim {dim} ({expected} bytes), file has {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let id_block = &bytes[EMBEDDING_HEADER_LEN..EMBEDDING_HEADER_LEN + 8 * count];
        let ids = id_block
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vectors = bytes[EMBEDDING_HEADER_LEN + 8 * count..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(dim, ids, vectors)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

/// Write `store` in `CSEM` format. An empty store yields a header-only file.
///
/// Components pass through `f32`; a store built from `f64` values that are not
/// exactly representable in `f32` will round on the way out.
pub fn write_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = store.to_bytes()?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// `v / ‖v‖` with the default degenerate-norm threshold.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_eps(v, DEFAULT_NORM_EPS)
}

pub fn l2_normalize_eps(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = linalg::norm(v);
    if !(n > eps) {
        return Err(Error::DegenerateVector { norm: n, eps });
    }
    Ok(v.iter().map(|x| x / n).collect())
}
