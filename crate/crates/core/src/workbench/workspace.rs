//! On-disk workspace: the ingested corpus, the knowledge-base index, and one
//! directory per analysis run.
//!
//! ```text
//! <root>/corpus.json
//! <root>/index.thix
//! <root>/lda/{model.json,keywords.csv}
//! <root>/runs/LATEST
//! <root>/runs/<run_id>/{manifest.json,audit.jsonl,prompts/,topics.json,themes.json,
//!                       evaluation.json,report.json,report.csv}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, GoldTopicSet};
use crate::embedding::{provider_for, CachedProvider, EmbeddingProvider, EmbeddingProviderConfig};
use crate::lda::{self, LdaModel, Preprocessing};
use crate::llm::{AnthropicBackend, LlmBackend, LlmClient, ScriptedBackend};
use crate::metrics::ScoreReport;
use crate::pipeline::{self, Evaluation, LlmSettings, Pipeline, RunConfig, RunOutputs, Templates, TopicRef};
use crate::prompting::{PromptTemplate, StrategyKind, TopicSet};
use crate::retrieval::{build_index, VectorIndex};
use crate::sha256_hex;

use super::audit::AuditLog;
use super::config::{BackendKind, LlmConfig, Settings};
use super::manifest::{file_digest, EvaluationSpec, InputDigest, InputRole, RunManifest, Seeds, MANIFEST_FILE};
use super::WorkbenchError;

pub const CORPUS_FILE: &str = "corpus.json";
pub const INDEX_FILE: &str = "index.thix";
pub const RUNS_DIR: &str = "runs";
pub const LATEST_FILE: &str = "LATEST";
pub const LDA_DIR: &str = "lda";
pub const TOPICS_FILE: &str = "topics.json";
pub const THEMES_FILE: &str = "themes.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPLAY_DIR: &str = "replay";

/// The ingested corpus plus digests of the files it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStore {
    pub sources: Vec<InputDigest>,
    pub corpus: Corpus,
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub outputs: RunOutputs,
    /// Completions requested from the backend.
    pub completions: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub run_dir: PathBuf,
    pub compared: Vec<String>,
    pub outputs: RunOutputs,
}

pub struct Workspace {
    root: PathBuf,
    settings: Settings,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), WorkbenchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| WorkbenchError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| WorkbenchError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkbenchError> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| WorkbenchError::json(path, e))
}

fn validate_run_id(id: &str) -> Result<(), WorkbenchError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(WorkbenchError::Config(format!(
            "run id `{id}` may only contain letters, digits, `-`, `_` and `.`"
        )))
    }
}

fn embedder(cfg: &EmbeddingProviderConfig, cache_dir: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>, WorkbenchError> {
    let inner = provider_for(cfg)?;
    Ok(match cache_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))?;
            let file = dir.join(format!("{}.jsonl", sha256_hex(&cfg.model_id)));
            Box::new(CachedProvider::open(inner, &file)?)
        }
        None => inner,
    })
}

fn backend(llm: &LlmConfig) -> Result<Box<dyn LlmBackend>, WorkbenchError> {
    match llm.backend {
        BackendKind::Scripted => {
            let path = llm
                .script
                .as_deref()
                .ok_or_else(|| WorkbenchError::Config("the scripted backend needs `llm.script`".into()))?;
            Ok(Box::new(ScriptedBackend::load(path)?))
        }
        BackendKind::Anthropic => Ok(Box::new(AnthropicBackend::from_env(
            llm.base_url.as_deref(),
            &llm.api_key_env,
        )?)),
    }
}

fn llm_settings(llm: &LlmConfig) -> LlmSettings {
    LlmSettings {
        model_id: llm.model_id.clone(),
        temperature: llm.temperature,
        max_output_tokens: llm.max_output_tokens,
    }
}

/// Runs the pipeline into `run_dir` and writes topics and themes.
#[allow(clippy::too_many_arguments)]
fn execute_run(
    run_dir: &Path,
    run_id: &str,
    cfg: &RunConfig,
    templates: &Templates,
    corpus: &Corpus,
    index: Option<&VectorIndex>,
    retrieval_embedder: &dyn EmbeddingProvider,
    backend: &dyn LlmBackend,
) -> Result<(RunOutputs, usize), WorkbenchError> {
    let audit = AuditLog::open(run_dir, run_id)?;
    let client = LlmClient::new(backend, &audit);
    let pipeline = Pipeline::new(cfg, corpus, templates, retrieval_embedder, index, client, &audit)?;
    let outputs = pipeline.run()?;
    let completions = pipeline.llm.calls();
    write_json(&run_dir.join(TOPICS_FILE), &outputs.topic_sets)?;
    write_json(&run_dir.join(THEMES_FILE), &outputs.themes)?;
    audit.close();
    Ok((outputs, completions))
}

fn execute_evaluation(
    run_dir: &Path,
    run_id: &str,
    topic_sets: &[TopicSet],
    gold: &[GoldTopicSet],
    cfg: &RunConfig,
    models: &[Box<dyn EmbeddingProvider>],
) -> Result<Evaluation, WorkbenchError> {
    let audit = AuditLog::open(run_dir, run_id)?;
    let refs: Vec<&dyn EmbeddingProvider> = models.iter().map(|m| m.as_ref()).collect();
    let evaluation = pipeline::evaluate(topic_sets, gold, &cfg.questions, &refs, &audit)?;
    audit.close();
    write_json(&run_dir.join(EVALUATION_FILE), &evaluation)?;
    write_file(&run_dir.join(REPORT_JSON), evaluation.report.to_json())?;
    write_file(&run_dir.join(REPORT_CSV), evaluation.report.to_csv())?;
    Ok(evaluation)
}

fn rebuild_index(cfg: &RunConfig, corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<VectorIndex, WorkbenchError> {
    Ok(build_index(&corpus.chunks(cfg.chunking)?, provider)?)
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, settings: Settings) -> Self {
        Self {
            root: root.into(),
            settings,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(RUNS_DIR).join(run_id)
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join(INDEX_FILE)
    }

    /// Loads transcripts from files or directories into the corpus store.
    pub fn ingest(&self, paths: &[PathBuf]) -> Result<CorpusStore, WorkbenchError> {
        let files = corpus::expand_transcript_paths(paths)?;
        let transcripts = files
            .iter()
            .map(|p| corpus::load_transcript(p))
            .collect::<Result<Vec<_>, _>>()?;
        let sources = files
            .iter()
            .map(|p| InputDigest::of(InputRole::Transcript, p))
            .collect::<Result<Vec<_>, _>>()?;
        let store = CorpusStore {
            sources,
            corpus: Corpus::new(transcripts)?,
        };
        write_json(&self.root.join(CORPUS_FILE), &store)?;
        Ok(store)
    }

    pub fn corpus(&self) -> Result<CorpusStore, WorkbenchError> {
        let path = self.root.join(CORPUS_FILE);
        if !path.exists() {
            return Err(WorkbenchError::MissingCorpus(path));
        }
        read_json(&path)
    }

    fn retrieval_embedder(&self) -> Result<Box<dyn EmbeddingProvider>, WorkbenchError> {
        embedder(&self.settings.embedding, self.settings.embedding_cache.as_deref())
    }

    /// Chunks and embeds the corpus into the knowledge-base index.
    pub fn index(&self) -> Result<VectorIndex, WorkbenchError> {
        let store = self.corpus()?;
        let chunks = store.corpus.chunks(self.settings.retrieval.chunking())?;
        let index = build_index(&chunks, self.retrieval_embedder()?.as_ref())?;
        index.save(&self.index_path())?;
        Ok(index)
    }

    fn load_index(&self) -> Result<VectorIndex, WorkbenchError> {
        let path = self.index_path();
        if !path.exists() {
            return Err(WorkbenchError::MissingIndex(path));
        }
        let index = VectorIndex::load(&path)?;
        if index.model_id != self.settings.embedding.model_id {
            return Err(WorkbenchError::IndexModelMismatch {
                index: index.model_id,
                config: self.settings.embedding.model_id.clone(),
            });
        }
        Ok(index)
    }

    fn templates(&self) -> Result<(Templates, Vec<InputDigest>), WorkbenchError> {
        let mut templates = Templates::default();
        let mut digests = Vec::new();
        for (&strategy, path) in &self.settings.analysis.templates {
            templates.set(PromptTemplate::load(strategy, path)?);
            digests.push(InputDigest::of(InputRole::Template, path)?);
        }
        Ok((templates, digests))
    }

    fn run_config(&self, strategies: &[StrategyKind], questions: Vec<corpus::ResearchQuestion>) -> RunConfig {
        let s = &self.settings;
        let mut cfg = RunConfig::new(strategies.to_vec(), questions, s.embedding.clone());
        cfg.retrieval_k = s.retrieval.k;
        cfg.chunking = s.retrieval.chunking();
        cfg.llm = llm_settings(&s.llm);
        cfg.theme_merge_threshold = s.themes.threshold;
        cfg.theme_scope = s.themes.scope;
        cfg.context_budget_words = s.analysis.context_budget_words;
        cfg
    }

    /// Runs the given strategies over every question in `questions_path`.
    pub fn analyze(
        &self,
        strategies: &[StrategyKind],
        questions_path: &Path,
        run_id: Option<&str>,
    ) -> Result<AnalyzeSummary, WorkbenchError> {
        let run_id = match run_id {
            Some(id) => id.to_string(),
            None => format!("run-{}", Utc::now().format("%Y%m%dT%H%M%S%3fZ")),
        };
        validate_run_id(&run_id)?;
        let store = self.corpus()?;
        let cfg = self.run_config(strategies, corpus::load_questions(questions_path)?);
        cfg.validate()?;
        let index = if cfg.strategies.contains(&StrategyKind::Rag) {
            Some(self.load_index()?)
        } else {
            None
        };
        let (templates, template_digests) = self.templates()?;

        let mut llm = self.settings.llm.clone();
        let mut inputs = store.sources.clone();
        inputs.push(InputDigest::of(InputRole::Questions, questions_path)?);
        inputs.extend(template_digests);
        if let Some(script) = llm.script.as_mut() {
            if llm.backend == BackendKind::Scripted {
                *script = std::path::absolute(&*script).map_err(|e| WorkbenchError::io(script, e))?;
                inputs.push(InputDigest::of(InputRole::Script, script)?);
            }
        }
        let backend = backend(&llm)?;
        let embedder = self.retrieval_embedder()?;

        let run_dir = self.run_dir(&run_id);
        fs::create_dir_all(&run_dir).map_err(|e| WorkbenchError::io(&run_dir, e))?;
        let manifest = RunManifest {
            run_id: run_id.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            templates: templates.clone(),
            llm,
            backend: backend.identity(),
            inputs,
            seeds: Seeds {
                embedding: cfg.embedding.seed,
                evaluation: Vec::new(),
            },
            index_sha256: index.as_ref().map(|i| sha256_hex(i.to_bytes())),
            evaluation: None,
        };
        manifest.save(&run_dir.join(MANIFEST_FILE))?;

        let (outputs, completions) = execute_run(
            &run_dir,
            &run_id,
            &cfg,
            &templates,
            &store.corpus,
            index.as_ref(),
            embedder.as_ref(),
            backend.as_ref(),
        )?;
        write_file(&self.root.join(RUNS_DIR).join(LATEST_FILE), &run_id)?;
        Ok(AnalyzeSummary {
            run_id,
            run_dir,
            outputs,
            completions,
        })
    }

    /// `run` or, when absent, the most recent run.
    pub fn resolve_run(&self, run: Option<&str>) -> Result<String, WorkbenchError> {
        let id = match run {
            Some(id) => id.to_string(),
            None => {
                let latest = self.root.join(RUNS_DIR).join(LATEST_FILE);
                fs::read_to_string(&latest).map_err(|_| WorkbenchError::NoRuns)?.trim().to_string()
            }
        };
        validate_run_id(&id)?;
        if !self.run_dir(&id).join(MANIFEST_FILE).exists() {
            return Err(WorkbenchError::NoRuns);
        }
        Ok(id)
    }

    /// Scores a run's topics against gold topics under each named model.
    pub fn evaluate(&self, run: Option<&str>, gold_path: &Path, model_ids: &[String]) -> Result<Evaluation, WorkbenchError> {
        let run_id = self.resolve_run(run)?;
        let run_dir = self.run_dir(&run_id);
        let manifest_path = run_dir.join(MANIFEST_FILE);
        let mut manifest = RunManifest::load(&manifest_path)?;
        if model_ids.is_empty() {
            return Err(WorkbenchError::Config("no evaluation models given".into()));
        }
        let configs = model_ids
            .iter()
            .map(|id| self.settings.evaluation_model(id))
            .collect::<Result<Vec<_>, _>>()?;
        let models = configs
            .iter()
            .map(|c| embedder(c, self.settings.embedding_cache.as_deref()))
            .collect::<Result<Vec<_>, _>>()?;
        let gold = corpus::load_gold(gold_path)?;
        let topic_sets: Vec<TopicSet> = read_json(&run_dir.join(TOPICS_FILE))?;
        let evaluation = execute_evaluation(&run_dir, &run_id, &topic_sets, &gold, &manifest.config, &models)?;

        manifest.inputs.retain(|i| i.role != InputRole::Gold);
        manifest.inputs.push(InputDigest::of(InputRole::Gold, gold_path)?);
        manifest.seeds.evaluation = configs.iter().map(|c| (c.model_id.clone(), c.seed)).collect();
        manifest.evaluation = Some(EvaluationSpec { models: configs });
        manifest.save(&manifest_path)?;
        Ok(evaluation)
    }

    pub fn report(&self, run: Option<&str>) -> Result<ScoreReport, WorkbenchError> {
        let run_id = self.resolve_run(run)?;
        let path = self.run_dir(&run_id).join(REPORT_JSON);
        if !path.exists() {
            return Err(WorkbenchError::NotEvaluated(run_id));
        }
        read_json(&path)
    }

    pub fn topic_sets(&self, run: Option<&str>) -> Result<Vec<TopicSet>, WorkbenchError> {
        let run_id = self.resolve_run(run)?;
        read_json(&self.run_dir(&run_id).join(TOPICS_FILE))
    }

    /// Asks the configured backend why a topic was extracted; the answer is
    /// appended to the run's audit log.
    pub fn rationale(&self, run: Option<&str>, topic_id: &str) -> Result<String, WorkbenchError> {
        let run_id = self.resolve_run(run)?;
        let run_dir = self.run_dir(&run_id);
        let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
        let sets: Vec<TopicSet> = read_json(&run_dir.join(TOPICS_FILE))?;
        let topic_ref = TopicRef::parse(topic_id).ok_or_else(|| WorkbenchError::UnknownTopic(topic_id.into()))?;
        let topic = topic_ref
            .resolve(&sets)
            .ok_or_else(|| WorkbenchError::UnknownTopic(topic_id.into()))?;
        let store = self.corpus()?;
        let chunks = store.corpus.chunks(manifest.config.chunking)?;
        let backend = backend(&self.settings.llm)?;
        let audit = AuditLog::open(&run_dir, &run_id)?;
        let client = LlmClient::new(backend.as_ref(), &audit);
        let text = pipeline::request_rationale(
            &topic_ref,
            topic,
            &client,
            &llm_settings(&self.settings.llm),
            &store.corpus,
            &chunks,
            &audit,
        )?;
        audit.close();
        Ok(text)
    }

    /// Fits the LDA baseline on the ingested corpus and writes the model and
    /// its keyword table.
    pub fn lda(&self, topics: usize) -> Result<(LdaModel, Vec<String>), WorkbenchError> {
        let store = self.corpus()?;
        let pre = Preprocessing {
            min_token_len: self.settings.lda.min_token_len,
            ..Preprocessing::default()
        };
        let bow = lda::build_bow(&store.corpus.transcripts, &pre)?;
        let model = lda::fit(&bow, &self.settings.lda.params(topics))?;
        let dir = self.root.join(LDA_DIR);
        fs::create_dir_all(&dir).map_err(|e| WorkbenchError::io(&dir, e))?;
        model.save(&dir.join("model.json"))?;
        write_file(&dir.join("keywords.csv"), model.keywords_csv(self.settings.lda.top_n))?;
        Ok((model, bow.warnings))
    }
}

/// Re-executes a scripted run from its manifest into `<run_dir>/replay` and
/// checks that every output file matches the original byte for byte.
pub fn replay(manifest_path: &Path) -> Result<ReplayOutcome, WorkbenchError> {
    let manifest = RunManifest::load(manifest_path)?;
    if !manifest.backend.is_scripted() || manifest.llm.backend != BackendKind::Scripted {
        return Err(WorkbenchError::LiveBackendNotReplayable(manifest.backend.name.clone()));
    }
    manifest.verify_inputs()?;
    let original_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let out_dir = original_dir.join(REPLAY_DIR);
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir).map_err(|e| WorkbenchError::io(&out_dir, e))?;
    }
    fs::create_dir_all(&out_dir).map_err(|e| WorkbenchError::io(&out_dir, e))?;

    let transcripts = manifest
        .inputs_of(InputRole::Transcript)
        .map(|i| corpus::load_transcript(&i.path))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = Corpus::new(transcripts)?;
    let backend = backend(&manifest.llm)?;
    if backend.identity().digest != manifest.backend.digest {
        let script = manifest.llm.script.clone().unwrap_or_default();
        return Err(WorkbenchError::DigestMismatch {
            expected: manifest.backend.digest.clone().unwrap_or_default(),
            actual: backend.identity().digest.unwrap_or_default(),
            path: script,
        });
    }
    let cfg = &manifest.config;
    let retrieval = embedder(&cfg.embedding, None)?;
    let index = match &manifest.index_sha256 {
        Some(expected) => {
            let index = rebuild_index(cfg, &corpus, retrieval.as_ref())?;
            let actual = sha256_hex(index.to_bytes());
            if &actual != expected {
                return Err(WorkbenchError::DigestMismatch {
                    path: out_dir.join(INDEX_FILE),
                    expected: expected.clone(),
                    actual,
                });
            }
            Some(index)
        }
        None => None,
    };
    let (outputs, _) = execute_run(
        &out_dir,
        &manifest.run_id,
        cfg,
        &manifest.templates,
        &corpus,
        index.as_ref(),
        retrieval.as_ref(),
        backend.as_ref(),
    )?;
    let mut compared = vec![TOPICS_FILE.to_string(), THEMES_FILE.to_string()];
    if let Some(spec) = &manifest.evaluation {
        let gold_input = manifest
            .inputs_of(InputRole::Gold)
            .next()
            .ok_or_else(|| WorkbenchError::Config("evaluated run has no gold input".into()))?;
        let gold = corpus::load_gold(&gold_input.path)?;
        let models = spec
            .models
            .iter()
            .map(|c| embedder(c, None))
            .collect::<Result<Vec<_>, _>>()?;
        execute_evaluation(&out_dir, &manifest.run_id, &outputs.topic_sets, &gold, cfg, &models)?;
        compared.extend([EVALUATION_FILE, REPORT_JSON, REPORT_CSV].map(String::from));
    }
    let mut differing = Vec::new();
    for name in &compared {
        let a = file_digest(&original_dir.join(name))?;
        let b = file_digest(&out_dir.join(name))?;
        if a != b {
            differing.push(name.clone());
        }
    }
    if !differing.is_empty() {
        return Err(WorkbenchError::ReplayMismatch(differing));
    }
    Ok(ReplayOutcome {
        run_dir: out_dir,
        compared,
        outputs,
    })
}
