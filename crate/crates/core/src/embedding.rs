//! Binary embedding file: `SWGE`, `u32` count, `u32` dim, then `count * dim`
//! little-endian `f32` values row by row. Row ids come from a separate
//! manifest with one id per line.

use std::collections::HashMap;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SWGE";
const HEADER_LEN: usize = 12;

/// A fixed-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Rows of equal dimension keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, Embedding>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, e: Embedding) -> Result<()> {
        let id = id.into();
        if e.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: e.dim(),
            });
        }
        if let Some(bad) = e.0.iter().find(|v| !v.is_finite()) {
            return Err(Error::EmbeddingFormat(format!("non-finite value {bad} for `{id}`")));
        }
        if self.rows.insert(id.clone(), e).is_some() {
            return Err(Error::DuplicateImage(id));
        }
        self.ids.push(id);
        Ok(())
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.rows.get(id)
    }

    /// Parses the binary body and its manifest.
    pub fn read(bytes: &[u8], manifest: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::EmbeddingFormat("missing SWGE header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (count, dim) = (word(4), word(8));
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::EmbeddingFormat("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::EmbeddingFormat(format!(
                "expected {expected} bytes for {count} x {dim}, got {}",
                bytes.len()
            )));
        }
        let ids: Vec<&str> = manifest.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if ids.len() != count {
            return Err(Error::EmbeddingFormat(format!(
                "manifest lists {} ids for {count} rows",
                ids.len()
            )));
        }
        let mut index = Self::new(dim);
        for (r, id) in ids.into_iter().enumerate() {
            let start = HEADER_LEN + r * dim * 4;
            let row = bytes[start..start + dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            index.insert(id, Embedding(row))?;
        }
        Ok(index)
    }

    /// Serializes to `(binary body, manifest)`.
    pub fn write(&self) -> (Vec<u8>, String) {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ids.len() * self.dim * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let mut manifest = String::new();
        for id in &self.ids {
            for v in &self.rows[id].0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push_str(id);
            manifest.push('\n');
        }
        (out, manifest)
    }
}
