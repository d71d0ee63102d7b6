//! Exhaustive cosine-similarity index over transcript chunks.
//!
//! The on-disk form is little-endian binary:
//!
//! ```text
//! "THIX" | version u32 | model_id (u32 len, utf-8) | dimension u32 | count u64 |
//! count x ( chunk_id (u32 len, utf-8) | dimension x f64 )
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::embedding::{EmbeddingError, EmbeddingProvider};

pub const DEFAULT_TOP_K: usize = 5;
const MAGIC: &[u8; 4] = b"THIX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over zero chunks")]
    EmptyCorpus,
    #[error("duplicate chunk id `{0}`")]
    DuplicateChunkId(String),
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index was built with `{index}` but the query provider is `{provider}`")]
    ModelMismatch { index: String, provider: String },
    #[error("index file: {0}")]
    Format(String),
    #[error("index file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embedding(EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    pub model_id: String,
    pub dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    pub chunk_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_text: String,
    pub ranked: Vec<RankedChunk>,
}

impl RetrievalResult {
    pub fn chunk_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.chunk_id.as_str()).collect()
    }
}

pub fn build_index(chunks: &[Chunk], provider: &dyn EmbeddingProvider) -> Result<VectorIndex, RetrievalError> {
    if chunks.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for c in chunks {
        if !seen.insert(c.id.as_str()) {
            return Err(RetrievalError::DuplicateChunkId(c.id.clone()));
        }
    }
    let entries = chunks
        .iter()
        .map(|c| {
            Ok(IndexEntry {
                chunk_id: c.id.clone(),
                vector: provider.embed_text(&c.text).map_err(RetrievalError::Embedding)?,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    VectorIndex::from_entries(provider.config().model_id.clone(), entries)
}

impl VectorIndex {
    pub fn from_entries(model_id: String, entries: Vec<IndexEntry>) -> Result<Self, RetrievalError> {
        let dimension = entries.first().map_or(0, |e| e.vector.len());
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.chunk_id.as_str()) {
                return Err(RetrievalError::DuplicateChunkId(e.chunk_id.clone()));
            }
            if e.vector.len() != dimension {
                return Err(RetrievalError::Format(format!(
                    "entry `{}` has dimension {}, expected {dimension}",
                    e.chunk_id,
                    e.vector.len()
                )));
            }
        }
        Ok(Self {
            model_id,
            dimension,
            entries,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query(
        &self,
        question_text: &str,
        k: usize,
        provider: &dyn EmbeddingProvider,
    ) -> Result<RetrievalResult, RetrievalError> {
        if provider.config().model_id != self.model_id {
            return Err(RetrievalError::ModelMismatch {
                index: self.model_id.clone(),
                provider: provider.config().model_id.clone(),
            });
        }
        let q = provider.embed_text(question_text).map_err(|e| match e {
            EmbeddingError::EmptyText => RetrievalError::EmptyQuery,
            other => RetrievalError::Embedding(other),
        })?;
        let mut result = self.query_vector(&q, k)?;
        result.query_text = question_text.to_string();
        Ok(result)
    }

    /// Top-k by cosine similarity to a unit query vector; ties go to the
    /// smaller chunk id.
    pub fn query_vector(&self, query: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if query.len() != self.dimension {
            return Err(RetrievalError::Format(format!(
                "query dimension {} differs from index dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let mut ranked: Vec<RankedChunk> = self
            .entries
            .iter()
            .map(|e| RankedChunk {
                chunk_id: e.chunk_id.clone(),
                similarity: e.vector.iter().zip(query).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0),
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.chunk_id.cmp(&b.chunk_id))
        });
        ranked.truncate(k);
        Ok(RetrievalResult {
            query_text: String::new(),
            ranked,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, &self.model_id);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            write_str(&mut out, &e.chunk_id);
            for x in &e.vector {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let model_id = r.string()?;
        let dimension = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let chunk_id = r.string()?;
            let vector = (0..dimension)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            entries.push(IndexEntry { chunk_id, vector });
        }
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        let index = Self::from_entries(model_id, entries)?;
        if !index.entries.is_empty() && index.dimension != dimension {
            return Err(RetrievalError::Format("dimension header disagrees with entries".into()));
        }
        Ok(Self { dimension, ..index })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RetrievalError::Format("truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, RetrievalError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| RetrievalError::Format(e.to_string()))
    }
}
