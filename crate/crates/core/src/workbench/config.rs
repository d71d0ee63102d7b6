//! TOML settings for the command-line workbench.
//!
//! ```toml
//! [llm]
//! backend = "scripted"          # or "anthropic"
//! script = "mock_script.json"
//! model_id = "claude-2"
//!
//! [embedding]                   # retrieval and theme similarity
//! model_id = "hash-64"
//! kind = "deterministic-test"
//! dimension = 64
//!
//! [[evaluation.models]]
//! model_id = "distilbert-base-uncased"
//! kind = "contextual-backend"
//! dimension = 768
//! endpoint = "http://127.0.0.1:8089/embed"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkConfig;
use crate::embedding::{EmbeddingProviderConfig, ProviderKind};
use crate::lda::{LdaParams, DEFAULT_BETA, DEFAULT_ITERATIONS, DEFAULT_TOPICS};
use crate::llm::{ANTHROPIC_KEY_ENV, DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MODEL_ID};
use crate::pipeline::{ThemeScope, DEFAULT_CONTEXT_BUDGET_WORDS, DEFAULT_THEME_THRESHOLD};
use crate::prompting::StrategyKind;
use crate::retrieval::DEFAULT_TOP_K;

use super::WorkbenchError;

pub const CONFIG_ENV: &str = "THEMATIC_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    #[default]
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: BackendKind,
    /// Scripted backend only.
    pub script: Option<PathBuf>,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub base_url: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::default(),
            script: None,
            model_id: DEFAULT_MODEL_ID.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            base_url: None,
            api_key_env: ANTHROPIC_KEY_ENV.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let c = ChunkConfig::default();
        Self {
            k: DEFAULT_TOP_K,
            chunk_size: c.size,
            chunk_overlap: c.overlap,
        }
    }
}

impl RetrievalConfig {
    pub fn chunking(&self) -> ChunkConfig {
        ChunkConfig {
            size: self.chunk_size,
            overlap: self.chunk_overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThemeConfig {
    pub threshold: f64,
    pub scope: ThemeScope,
}

impl Default for ThemeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THEME_THRESHOLD,
            scope: ThemeScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub context_budget_words: usize,
    /// Template file overrides, keyed by strategy.
    pub templates: BTreeMap<StrategyKind, PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            context_budget_words: DEFAULT_CONTEXT_BUDGET_WORDS,
            templates: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Models selectable by `evaluate --models`.
    pub models: Vec<EmbeddingProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    pub topics: usize,
    /// Defaults to 50 / topics.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub top_n: usize,
    pub min_token_len: usize,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            topics: DEFAULT_TOPICS,
            alpha: None,
            beta: DEFAULT_BETA,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            top_n: 10,
            min_token_len: crate::lda::DEFAULT_MIN_TOKEN_LEN,
        }
    }
}

impl LdaConfig {
    pub fn params(&self, topics: usize) -> LdaParams {
        let base = LdaParams::with_k(topics);
        LdaParams {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta,
            iterations: self.iterations,
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub llm: LlmConfig,
    pub embedding: EmbeddingProviderConfig,
    /// Directory for per-model JSONL embedding caches.
    pub embedding_cache: Option<PathBuf>,
    pub retrieval: RetrievalConfig,
    pub themes: ThemeConfig,
    pub analysis: AnalysisConfig,
    pub evaluation: EvaluationConfig,
    pub lda: LdaConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            llm: LlmConfig::default(),
            embedding: EmbeddingProviderConfig::deterministic("hash-64", 64, 0),
            embedding_cache: None,
            retrieval: RetrievalConfig::default(),
            themes: ThemeConfig::default(),
            analysis: AnalysisConfig::default(),
            evaluation: EvaluationConfig::default(),
            lda: LdaConfig::default(),
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, WorkbenchError> {
        let mut s: Settings = toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        s.resolve_paths(base_dir);
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The config named by `flag`, else by `$THEMATIC_CONFIG`, else defaults.
    pub fn discover(flag: Option<&Path>) -> Result<Self, WorkbenchError> {
        match flag {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.llm.script.as_mut() {
            fix(p);
        }
        if let Some(p) = self.embedding_cache.as_mut() {
            fix(p);
        }
        for p in self.analysis.templates.values_mut() {
            fix(p);
        }
    }

    pub fn evaluation_model(&self, id: &str) -> Result<EmbeddingProviderConfig, WorkbenchError> {
        if let Some(m) = self.evaluation.models.iter().find(|m| m.model_id == id) {
            return Ok(m.clone());
        }
        if self.embedding.model_id == id {
            return Ok(self.embedding.clone());
        }
        Err(WorkbenchError::UnknownModel(id.into()))
    }

    pub fn uses_live_embeddings(&self) -> bool {
        self.embedding.kind == ProviderKind::ContextualBackend
    }
}
