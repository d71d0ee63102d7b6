//! Token-level and text-level embeddings behind one provider interface.
//!
//! Every returned row is unit-normalized, so a plain dot product between two
//! rows is their cosine similarity. Two providers ship with the crate:
//!
//! - [`DeterministicProvider`]: offline, derives a fixed pseudo-random unit
//!   vector for each distinct token string from `(seed, token)`.
//! - [`HttpEmbeddingProvider`]: a contextual backend reached over HTTP. It
//!   POSTs `{"model": .., "text": ..}` to the configured endpoint and expects
//!   `{"tokens": [..], "vectors": [[..]], "special": [bool]?}` back. Sentinel
//!   tokens (`[CLS]`, `<s>`, ...) are dropped before normalization.
//!
//! [`CachedProvider`] wraps either one with a JSON-lines cache keyed by
//! `(model_id, sha256(text))`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize;
use crate::rng::Lcg64;
use crate::sha256_hex;

pub const DEFAULT_DIMENSION: usize = 64;

/// Tokens a contextual backend adds around the input text.
pub const SENTINEL_TOKENS: &[&str] = &[
    "[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]", "<s>", "</s>", "<pad>", "<mask>", "<unk>",
];

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no tokens survive tokenization")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid embedding config for `{model_id}`: {reason}")]
    InvalidConfig { model_id: String, reason: String },
    #[error("backend returned {got}-dimensional vectors, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("token vectors average to the zero vector")]
    DegenerateMean,
    #[error("embedding cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    ContextualBackend,
    DeterministicTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub model_id: String,
    pub kind: ProviderKind,
    pub dimension: usize,
    #[serde(default)]
    pub seed: u64,
    /// HTTP endpoint of a contextual backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Backend-side model name when it differs from `model_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_model: Option<String>,
}

impl EmbeddingProviderConfig {
    pub fn deterministic(model_id: impl Into<String>, dimension: usize, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            kind: ProviderKind::DeterministicTest,
            dimension,
            seed,
            endpoint: None,
            backend_model: None,
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let invalid = |reason: &str| EmbeddingError::InvalidConfig {
            model_id: self.model_id.clone(),
            reason: reason.to_string(),
        };
        if self.model_id.trim().is_empty() {
            return Err(invalid("empty model_id"));
        }
        if self.dimension < 2 {
            return Err(invalid("dimension must be at least 2"));
        }
        if self.kind == ProviderKind::ContextualBackend && self.endpoint.is_none() {
            return Err(invalid("contextual backend needs an endpoint"));
        }
        Ok(())
    }
}

/// Unit-normalized token vectors for one text under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub model_id: String,
    pub tokens: Vec<String>,
    pub dimension: usize,
    /// Row-major, `tokens.len() * dimension` values.
    data: Vec<f64>,
}

impl TokenEmbeddings {
    /// Builds the matrix from raw rows, normalizing each one.
    pub fn from_rows(
        model_id: impl Into<String>,
        tokens: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, EmbeddingError> {
        if rows.len() != tokens.len() {
            return Err(EmbeddingError::BadResponse(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                rows.len()
            )));
        }
        let dimension = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dimension);
        for row in rows {
            if row.len() != dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dimension,
                    got: row.len(),
                });
            }
            let norm = l2_norm(&row);
            if norm == 0.0 || !norm.is_finite() {
                return Err(EmbeddingError::BadResponse("zero or non-finite vector".into()));
            }
            data.extend(row.iter().map(|x| x / norm));
        }
        Ok(Self {
            model_id: model_id.into(),
            tokens,
            dimension,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dimension.max(1))
    }

    /// Mean of the rows, re-normalized to unit length.
    pub fn mean_unit(&self) -> Result<Vec<f64>, EmbeddingError> {
        if self.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut mean = vec![0.0; self.dimension];
        for row in self.rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let norm = l2_norm(&mean);
        if norm == 0.0 {
            return Err(EmbeddingError::DegenerateMean);
        }
        mean.iter_mut().for_each(|m| *m /= norm);
        Ok(mean)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub trait EmbeddingProvider: Send + Sync {
    fn config(&self) -> &EmbeddingProviderConfig;

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbeddingError>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        self.embed_tokens(text)?.mean_unit()
    }
}

/// Builds the provider described by `cfg`.
pub fn provider_for(cfg: &EmbeddingProviderConfig) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::DeterministicTest => Box::new(DeterministicProvider::new(cfg.clone())?),
        ProviderKind::ContextualBackend => Box::new(HttpEmbeddingProvider::new(cfg.clone())?),
    })
}

pub fn embed_tokens(text: &str, cfg: &EmbeddingProviderConfig) -> Result<TokenEmbeddings, EmbeddingError> {
    provider_for(cfg)?.embed_tokens(text)
}

pub fn embed_text(text: &str, cfg: &EmbeddingProviderConfig) -> Result<Vec<f64>, EmbeddingError> {
    provider_for(cfg)?.embed_text(text)
}

#[derive(Debug, Clone)]
pub struct DeterministicProvider {
    cfg: EmbeddingProviderConfig,
}

impl DeterministicProvider {
    pub fn new(cfg: EmbeddingProviderConfig) -> Result<Self, EmbeddingError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// The fixed unit vector assigned to `token`.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut material = self.cfg.seed.to_le_bytes().to_vec();
        material.extend_from_slice(token.as_bytes());
        let digest = sha256_hex(&material);
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = Lcg64::new(seed);
        let mut v: Vec<f64> = (0..self.cfg.dimension)
            .map(|_| 2.0 * rng.next_f64() - 1.0)
            .collect();
        let norm = l2_norm(&v);
        if norm == 0.0 {
            v[0] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingProvider for DeterministicProvider {
    fn config(&self) -> &EmbeddingProviderConfig {
        &self.cfg
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbeddingError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut data = Vec::with_capacity(tokens.len() * self.cfg.dimension);
        for t in &tokens {
            let v = cache.entry(t.as_str()).or_insert_with(|| self.token_vector(t));
            data.extend_from_slice(v);
        }
        Ok(TokenEmbeddings {
            model_id: self.cfg.model_id.clone(),
            dimension: self.cfg.dimension,
            tokens,
            data,
        })
    }
}

#[derive(Debug, Serialize)]
struct BackendRequest<'a> {
    model: &'a str,
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct BackendResponse {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    #[serde(default)]
    special: Option<Vec<bool>>,
}

pub struct HttpEmbeddingProvider {
    cfg: EmbeddingProviderConfig,
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: EmbeddingProviderConfig) -> Result<Self, EmbeddingError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.clone().unwrap_or_default();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        Ok(Self { cfg, endpoint, agent })
    }

    fn request(&self, text: &str) -> Result<BackendResponse, EmbeddingError> {
        let model = self.cfg.backend_model.as_deref().unwrap_or(&self.cfg.model_id);
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(BackendRequest { model, text })
            .map_err(|e| EmbeddingError::ProviderUnavailable(format!("{}: {e}", self.endpoint)))?;
        response
            .body_mut()
            .read_json::<BackendResponse>()
            .map_err(|e| EmbeddingError::BadResponse(e.to_string()))
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn config(&self) -> &EmbeddingProviderConfig {
        &self.cfg
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let response = self.request(text)?;
        if response.tokens.len() != response.vectors.len() {
            return Err(EmbeddingError::BadResponse(format!(
                "{} tokens but {} vectors",
                response.tokens.len(),
                response.vectors.len()
            )));
        }
        let special = response.special.unwrap_or_else(|| vec![false; response.tokens.len()]);
        if special.len() != response.tokens.len() {
            return Err(EmbeddingError::BadResponse("special mask length differs from tokens".into()));
        }
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for ((token, vector), is_special) in response.tokens.into_iter().zip(response.vectors).zip(special) {
            if is_special || SENTINEL_TOKENS.contains(&token.as_str()) {
                continue;
            }
            if vector.len() != self.cfg.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: self.cfg.dimension,
                    got: vector.len(),
                });
            }
            tokens.push(token);
            rows.push(vector);
        }
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        TokenEmbeddings::from_rows(self.cfg.model_id.clone(), tokens, rows)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    model_id: String,
    text_hash: String,
    embeddings: TokenEmbeddings,
}

/// Transparent JSON-lines cache in front of another provider.
pub struct CachedProvider {
    inner: Box<dyn EmbeddingProvider>,
    path: PathBuf,
    state: Mutex<CacheState>,
}

struct CacheState {
    entries: HashMap<String, TokenEmbeddings>,
    file: File,
}

impl CachedProvider {
    pub fn open(inner: Box<dyn EmbeddingProvider>, path: &Path) -> Result<Self, EmbeddingError> {
        let cache_err = |reason: String| EmbeddingError::Cache {
            path: path.to_path_buf(),
            reason,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| cache_err(e.to_string()))?);
            for line in reader.lines() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| cache_err(e.to_string()))?;
                entries.insert(cache_key(&record.model_id, &record.text_hash), record.embeddings);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            state: Mutex::new(CacheState { entries, file }),
        })
    }

    pub fn cached_len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }
}

fn cache_key(model_id: &str, text_hash: &str) -> String {
    format!("{model_id}\u{0}{text_hash}")
}

impl EmbeddingProvider for CachedProvider {
    fn config(&self) -> &EmbeddingProviderConfig {
        self.inner.config()
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbeddingError> {
        let model_id = self.inner.config().model_id.clone();
        let text_hash = sha256_hex(text);
        let key = cache_key(&model_id, &text_hash);
        if let Some(hit) = self.state.lock().expect("cache lock").entries.get(&key) {
            return Ok(hit.clone());
        }
        let embeddings = self.inner.embed_tokens(text)?;
        let record = CacheRecord {
            model_id,
            text_hash,
            embeddings,
        };
        let line = serde_json::to_string(&record).map_err(|e| EmbeddingError::Cache {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        let mut state = self.state.lock().expect("cache lock");
        writeln!(state.file, "{line}").map_err(|e| EmbeddingError::Cache {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        state.entries.insert(key, record.embeddings.clone());
        Ok(record.embeddings)
    }
}
