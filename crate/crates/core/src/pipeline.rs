//! End-to-end analysis: one prompt per (strategy, question) cell, anecdote
//! grounding, theme aggregation, rationale follow-ups, and scoring against
//! gold topics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{tokenize_spans, Chunk, ChunkConfig, Corpus, CorpusError, GoldTopicSet, ResearchQuestion, Transcript};
use crate::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingProviderConfig};
use crate::llm::{LlmClient, LlmError, LlmRequest, DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MODEL_ID};
use crate::metrics::{self, build_report, MetricsError, PairScore, ScoreDetail, ScoreReport};
use crate::prompting::{
    parse_topics, render_prompt, ContextPassage, Grounding, PromptContext, PromptError, PromptTemplate, SourceLocation,
    StrategyKind, Topic, TopicSet,
};
use crate::retrieval::{RetrievalError, VectorIndex, DEFAULT_TOP_K};
use crate::sha256_hex;
use crate::workbench::audit::{AuditError, AuditKind, AuditLog};

pub const DEFAULT_THEME_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CONTEXT_BUDGET_WORDS: usize = 60_000;
/// Bumped whenever the grounding normalization rules change.
pub const GROUNDING_RULES_VERSION: u32 = 1;
/// Slack on the theme threshold so identical texts merge at θ = 1 despite
/// rounding in the dot product.
const SIMILARITY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("the rag strategy needs a knowledge-base index; build one first")]
    MissingIndex,
    #[error("index entry `{0}` is not a chunk of the current corpus")]
    IndexCorpusMismatch(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeScope {
    #[default]
    AcrossQuestions,
    PerQuestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            model_id: DEFAULT_MODEL_ID.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategies: Vec<StrategyKind>,
    pub questions: Vec<ResearchQuestion>,
    /// Model used for retrieval and theme similarity.
    pub embedding: EmbeddingProviderConfig,
    pub retrieval_k: usize,
    pub chunking: ChunkConfig,
    pub llm: LlmSettings,
    pub theme_merge_threshold: f64,
    #[serde(default)]
    pub theme_scope: ThemeScope,
    pub context_budget_words: usize,
}

impl RunConfig {
    pub fn new(strategies: Vec<StrategyKind>, questions: Vec<ResearchQuestion>, embedding: EmbeddingProviderConfig) -> Self {
        let mut cfg = Self {
            strategies,
            questions,
            embedding,
            retrieval_k: DEFAULT_TOP_K,
            chunking: ChunkConfig::default(),
            llm: LlmSettings::default(),
            theme_merge_threshold: DEFAULT_THEME_THRESHOLD,
            theme_scope: ThemeScope::default(),
            context_budget_words: DEFAULT_CONTEXT_BUDGET_WORDS,
        };
        cfg.normalize();
        cfg
    }

    /// Sorts strategies into execution order and drops duplicates.
    pub fn normalize(&mut self) {
        self.strategies.sort();
        self.strategies.dedup();
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.strategies.is_empty() {
            return bad("no strategies");
        }
        if self.questions.is_empty() {
            return bad("no research questions");
        }
        if !(self.theme_merge_threshold > 0.0 && self.theme_merge_threshold <= 1.0) {
            return bad("theme_merge_threshold must lie in (0, 1]");
        }
        if self.retrieval_k == 0 {
            return bad("retrieval k must be at least 1");
        }
        if self.context_budget_words == 0 {
            return bad("context budget must be positive");
        }
        for q in &self.questions {
            q.validate()?;
        }
        self.chunking.validate()?;
        self.embedding.validate()?;
        Ok(())
    }
}

/// Prompt templates, one per strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates(pub BTreeMap<StrategyKind, PromptTemplate>);

impl Default for Templates {
    fn default() -> Self {
        Self(StrategyKind::ALL.into_iter().map(|s| (s, PromptTemplate::default_for(s))).collect())
    }
}

impl Templates {
    pub fn get(&self, s: StrategyKind) -> PromptTemplate {
        self.0.get(&s).cloned().unwrap_or_else(|| PromptTemplate::default_for(s))
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.0.insert(template.strategy, template);
    }
}

/// Position of a topic within a run's topic sets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicRef {
    pub strategy: StrategyKind,
    pub question_id: String,
    pub index: usize,
}

impl TopicRef {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.strategy, self.question_id, self.index)
    }

    pub fn parse(id: &str) -> Option<Self> {
        let mut parts = id.splitn(3, '/');
        let strategy = parts.next()?.parse().ok()?;
        let question_id = parts.next()?.to_string();
        let index = parts.next()?.parse().ok()?;
        Some(Self {
            strategy,
            question_id,
            index,
        })
    }

    pub fn resolve<'a>(&self, sets: &'a [TopicSet]) -> Option<&'a Topic> {
        sets.iter()
            .find(|s| s.strategy == self.strategy && s.question_id == self.question_id)
            .and_then(|s| s.topics.get(self.index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub id: String,
    pub member_topics: Vec<TopicRef>,
    pub representative_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingStatus {
    Grounded,
    Ungrounded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub status: GroundingStatus,
    pub transcript_id: Option<String>,
    /// Character offset into the transcript's full text.
    pub offset: Option<usize>,
    pub normalized_match: bool,
}

impl GroundingResult {
    fn ungrounded() -> Self {
        Self {
            status: GroundingStatus::Ungrounded,
            transcript_id: None,
            offset: None,
            normalized_match: false,
        }
    }

    pub fn apply(&self, topic: &mut Topic) {
        match (self.status, &self.transcript_id, self.offset) {
            (GroundingStatus::Grounded, Some(id), Some(offset)) => {
                topic.grounding = Grounding::Grounded;
                topic.source = Some(SourceLocation {
                    transcript_id: id.clone(),
                    offset,
                });
            }
            _ => {
                topic.grounding = Grounding::Ungrounded;
                topic.source = None;
            }
        }
    }
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace (punctuation, typographic quotes, ellipses), and collapses
/// whitespace runs to one space. Returns the normalized text and, for each of
/// its characters, the character index it came from.
pub fn normalize_for_grounding(text: &str) -> (String, Vec<usize>) {
    let mut out = String::new();
    let mut origin = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
        } else if c.is_alphanumeric() {
            if let Some(at) = pending_space.take() {
                out.push(' ');
                origin.push(at);
            }
            for lower in c.to_lowercase() {
                out.push(lower);
                origin.push(i);
            }
        }
    }
    (out, origin)
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

pub fn ground_anecdote(topic: &Topic, transcripts: &[Transcript]) -> GroundingResult {
    let Some(anecdote) = topic.anecdote.as_deref().filter(|a| !a.trim().is_empty()) else {
        return GroundingResult::ungrounded();
    };
    let (needle, _) = normalize_for_grounding(anecdote);
    if needle.is_empty() {
        return GroundingResult::ungrounded();
    }
    let texts: Vec<String> = transcripts.iter().map(Transcript::full_text).collect();
    for (t, text) in transcripts.iter().zip(&texts) {
        if let Some(byte) = text.find(anecdote) {
            return GroundingResult {
                status: GroundingStatus::Grounded,
                transcript_id: Some(t.id.clone()),
                offset: Some(char_offset(text, byte)),
                normalized_match: false,
            };
        }
    }
    for (t, text) in transcripts.iter().zip(&texts) {
        let (hay, origin) = normalize_for_grounding(text);
        if let Some(byte) = hay.find(&needle) {
            let normalized_char = char_offset(&hay, byte);
            return GroundingResult {
                status: GroundingStatus::Grounded,
                transcript_id: Some(t.id.clone()),
                offset: Some(origin[normalized_char]),
                normalized_match: true,
            };
        }
    }
    GroundingResult::ungrounded()
}

/// Single-link merge of topics whose summary embeddings have cosine ≥ θ.
pub fn aggregate_themes(
    topic_sets: &[TopicSet],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Vec<Theme>, PipelineError> {
    aggregate_themes_scoped(topic_sets, provider, threshold, ThemeScope::AcrossQuestions)
}

pub fn aggregate_themes_scoped(
    topic_sets: &[TopicSet],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
    scope: ThemeScope,
) -> Result<Vec<Theme>, PipelineError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PipelineError::InvalidConfig("theme threshold must lie in (0, 1]".into()));
    }
    let mut members: Vec<(TopicRef, &Topic)> = Vec::new();
    for set in topic_sets {
        for (index, topic) in set.topics.iter().enumerate() {
            members.push((
                TopicRef {
                    strategy: set.strategy,
                    question_id: set.question_id.clone(),
                    index,
                },
                topic,
            ));
        }
    }
    let vectors: Vec<Option<Vec<f64>>> = members
        .iter()
        .map(|(_, t)| match provider.embed_text(&t.summary_text()) {
            Ok(v) => Ok(Some(v)),
            Err(EmbeddingError::EmptyText) | Err(EmbeddingError::DegenerateMean) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;

    let n = members.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if scope == ThemeScope::PerQuestion && members[i].0.question_id != members[j].0.question_id {
                continue;
            }
            let (Some(a), Some(b)) = (&vectors[i], &vectors[j]) else {
                continue;
            };
            let sim: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if sim >= threshold - SIMILARITY_EPS {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut ordered: Vec<Vec<usize>> = groups.into_values().collect();
    ordered.sort_by_key(|g| g[0]);
    Ok(ordered
        .into_iter()
        .enumerate()
        .map(|(k, group)| {
            let representative = group
                .iter()
                .map(|&i| members[i].1)
                .max_by(|a, b| {
                    let len = |t: &Topic| t.anecdote.as_deref().map_or(0, |s| s.chars().count());
                    len(a).cmp(&len(b)).then_with(|| b.label.cmp(&a.label))
                })
                .expect("non-empty group");
            let question_id = match scope {
                ThemeScope::PerQuestion => Some(members[group[0]].0.question_id.clone()),
                ThemeScope::AcrossQuestions => None,
            };
            Theme {
                id: format!("theme-{:03}", k + 1),
                representative_label: representative.label.clone(),
                member_topics: group.iter().map(|&i| members[i].0.clone()).collect(),
                question_id,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub topic_sets: Vec<TopicSet>,
    pub themes: Vec<Theme>,
}

/// Transcripts as the non-rag strategies see them.
pub fn corpus_context(corpus: &Corpus) -> String {
    corpus
        .transcripts
        .iter()
        .map(|t| format!("### Transcript {}\n{}", t.id, t.full_text()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Keeps the first `budget` whitespace-separated words, cutting the tail.
pub fn truncate_words(text: &str, budget: usize) -> (&str, bool) {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            count += 1;
            if count > budget {
                return (text[..i].trim_end(), true);
            }
        }
    }
    (text, false)
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Borrowed inputs of one analysis run.
pub struct Pipeline<'a> {
    pub cfg: &'a RunConfig,
    pub corpus: &'a Corpus,
    pub templates: &'a Templates,
    pub embedder: &'a dyn EmbeddingProvider,
    pub index: Option<&'a VectorIndex>,
    pub llm: LlmClient<'a>,
    pub audit: &'a AuditLog,
    chunks: Vec<Chunk>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        corpus: &'a Corpus,
        templates: &'a Templates,
        embedder: &'a dyn EmbeddingProvider,
        index: Option<&'a VectorIndex>,
        llm: LlmClient<'a>,
        audit: &'a AuditLog,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let chunks = corpus.chunks(cfg.chunking)?;
        Ok(Self {
            cfg,
            corpus,
            templates,
            embedder,
            index,
            llm,
            audit,
            chunks,
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    fn request(&self, prompt: String) -> LlmRequest {
        LlmRequest {
            prompt,
            model_id: self.cfg.llm.model_id.clone(),
            temperature: self.cfg.llm.temperature,
            max_output_tokens: self.cfg.llm.max_output_tokens,
        }
    }

    fn retrieved_passages(&self, strategy: StrategyKind, question: &ResearchQuestion) -> Result<Vec<ContextPassage>, PipelineError> {
        let index = self.index.ok_or(PipelineError::MissingIndex)?;
        let mut query_text = question.text.clone();
        for sub in &question.sub_questions {
            query_text.push(' ');
            query_text.push_str(sub);
        }
        let result = index.query(&query_text, self.cfg.retrieval_k, self.embedder)?;
        self.audit.record(
            AuditKind::Retrieval,
            json!({
                "strategy": strategy,
                "question_id": question.id,
                "model_id": index.model_id,
                "k": self.cfg.retrieval_k,
                "ranked": result.ranked,
            }),
        )?;
        let mut passages = result
            .ranked
            .iter()
            .map(|r| {
                self.chunks
                    .iter()
                    .find(|c| c.id == r.chunk_id)
                    .map(|c| ContextPassage {
                        chunk_id: c.id.clone(),
                        text: c.text.clone(),
                    })
                    .ok_or_else(|| PipelineError::IndexCorpusMismatch(r.chunk_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // Over budget: drop the lowest-ranked passages first, keeping at least one.
        while passages.len() > 1
            && passages.iter().map(|p| word_count(&p.text)).sum::<usize>() > self.cfg.context_budget_words
        {
            passages.pop();
        }
        Ok(passages)
    }

    pub fn run_strategy(&self, strategy: StrategyKind, question: &ResearchQuestion) -> Result<TopicSet, PipelineError> {
        let template = self.templates.get(strategy);
        let full_context;
        let passages;
        let mut truncated = false;
        let context = if strategy == StrategyKind::Rag {
            passages = self.retrieved_passages(strategy, question)?;
            PromptContext::Retrieved(&passages)
        } else {
            full_context = corpus_context(self.corpus);
            let (kept, cut) = truncate_words(&full_context, self.cfg.context_budget_words);
            truncated = cut;
            PromptContext::Corpus(kept)
        };
        let prompt = render_prompt(strategy, question, &template, context)?;
        let prompt_hash = sha256_hex(&prompt);
        let response = self.llm.complete(&self.request(prompt))?;
        let parsed = parse_topics(&response, strategy, &question.id)?;
        let mut set = parsed.set;
        set.prompt_hash = prompt_hash;
        self.audit.record(
            AuditKind::Parse,
            json!({
                "strategy": strategy,
                "question_id": question.id,
                "prompt_hash": set.prompt_hash,
                "topics": set.topics.len(),
                "warnings": parsed.warnings,
                "context_truncated": truncated,
            }),
        )?;
        for (index, topic) in set.topics.iter_mut().enumerate() {
            let result = ground_anecdote(topic, &self.corpus.transcripts);
            result.apply(topic);
            let topic_id = TopicRef {
                strategy,
                question_id: question.id.clone(),
                index,
            }
            .id();
            self.audit.record(
                AuditKind::Grounding,
                json!({
                    "topic_id": topic_id,
                    "rules_version": GROUNDING_RULES_VERSION,
                    "result": result,
                }),
            )?;
        }
        Ok(set)
    }

    /// Every configured strategy against every question, in order, then themes.
    pub fn run(&self) -> Result<RunOutputs, PipelineError> {
        self.audit.record(
            AuditKind::Config,
            json!({ "run_config": self.cfg, "backend": self.llm.identity() }),
        )?;
        let mut topic_sets = Vec::new();
        for &strategy in &self.cfg.strategies {
            for question in &self.cfg.questions {
                topic_sets.push(self.run_strategy(strategy, question)?);
            }
        }
        let themes = aggregate_themes_scoped(
            &topic_sets,
            self.embedder,
            self.cfg.theme_merge_threshold,
            self.cfg.theme_scope,
        )?;
        Ok(RunOutputs { topic_sets, themes })
    }
}

/// Chunks holding the token at a grounded topic's source offset.
pub fn source_chunks<'c>(topic: &Topic, corpus: &Corpus, chunks: &'c [Chunk]) -> Vec<&'c Chunk> {
    let Some(source) = &topic.source else {
        return Vec::new();
    };
    let Some(transcript) = corpus.get(&source.transcript_id) else {
        return Vec::new();
    };
    let text = transcript.full_text();
    let token_index = tokenize_spans(&text)
        .iter()
        .position(|s| char_offset(&text, s.end) > source.offset)
        .unwrap_or(0);
    chunks
        .iter()
        .filter(|c| c.transcript_id == source.transcript_id && c.contains_token(token_index))
        .collect()
}

pub fn rationale_prompt(topic: &Topic, sources: &[&Chunk]) -> String {
    let mut p = String::from(
        "You extracted the topic below from a set of interview transcripts. Explain briefly why this topic was \
extracted and how the supporting text backs it up.\n\n",
    );
    p.push_str(&format!("Topic: {}\n", topic.label));
    if !topic.description.is_empty() {
        p.push_str(&format!("Description: {}\n", topic.description));
    }
    if let Some(a) = &topic.anecdote {
        p.push_str(&format!("Anecdote: \"{a}\"\n"));
    }
    if !sources.is_empty() {
        p.push_str("\nSource excerpts:\n");
        for c in sources {
            p.push_str(&format!("[{}]\n{}\n", c.id, c.text));
        }
    }
    p
}

/// Asks the model why it extracted `topic`; the answer is written to the
/// audit log as a `rationale` record.
pub fn request_rationale(
    topic_ref: &TopicRef,
    topic: &Topic,
    llm: &LlmClient<'_>,
    settings: &LlmSettings,
    corpus: &Corpus,
    chunks: &[Chunk],
    audit: &AuditLog,
) -> Result<String, PipelineError> {
    let sources = source_chunks(topic, corpus, chunks);
    let prompt = rationale_prompt(topic, &sources);
    let prompt_hash = sha256_hex(&prompt);
    let text = llm.complete(&LlmRequest {
        prompt,
        model_id: settings.model_id.clone(),
        temperature: settings.temperature,
        max_output_tokens: settings.max_output_tokens,
    })?;
    audit.record(
        AuditKind::Rationale,
        json!({
            "topic_id": topic_ref.id(),
            "prompt_hash": prompt_hash,
            "source_chunks": sources.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(),
            "rationale": text,
        }),
    )?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub score: PairScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEvaluation {
    pub strategy: StrategyKind,
    pub model_id: String,
    /// `None` when the strategy produced no topics.
    pub pooled: Option<ScoreDetail>,
    pub per_question: Vec<QuestionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub cells: Vec<CellEvaluation>,
}

/// Scores every strategy against the gold topics under every model. Each
/// scoring call writes one `score` audit record.
pub fn evaluate(
    topic_sets: &[TopicSet],
    gold: &[GoldTopicSet],
    questions: &[ResearchQuestion],
    models: &[&dyn EmbeddingProvider],
    audit: &AuditLog,
) -> Result<Evaluation, PipelineError> {
    for g in gold {
        g.validate(questions)?;
    }
    let mut strategies: Vec<StrategyKind> = topic_sets.iter().map(|s| s.strategy).collect();
    strategies.sort();
    strategies.dedup();

    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for provider in models {
        let model_id = provider.config().model_id.clone();
        for &strategy in &strategies {
            let sets: Vec<TopicSet> = topic_sets.iter().filter(|s| s.strategy == strategy).cloned().collect();
            let pooled = match metrics::score_pooled(&sets, gold, *provider) {
                Ok(detail) => Some(detail),
                Err(MetricsError::EmptyTopicSet) => None,
                Err(e) => return Err(e.into()),
            };
            let score = pooled.as_ref().map_or(PairScore::from_pr(0.0, 0.0), |d| d.score);
            audit.record(
                AuditKind::Score,
                json!({
                    "strategy": strategy,
                    "model_id": model_id,
                    "scope": "pooled",
                    "score": score,
                    "empty": pooled.is_none(),
                }),
            )?;
            let mut per_question = Vec::new();
            for set in &sets {
                let Some(g) = gold.iter().find(|g| g.question_id == set.question_id) else {
                    continue;
                };
                if set.topics.is_empty() {
                    continue;
                }
                let detail = metrics::score_topic_sets(set, g, *provider)?;
                audit.record(
                    AuditKind::Score,
                    json!({
                        "strategy": strategy,
                        "model_id": model_id,
                        "scope": "question",
                        "question_id": set.question_id,
                        "score": detail.score,
                    }),
                )?;
                per_question.push(QuestionScore {
                    question_id: set.question_id.clone(),
                    score: detail.score,
                });
            }
            runs.push((strategy, model_id.clone(), score));
            cells.push(CellEvaluation {
                strategy,
                model_id: model_id.clone(),
                pooled,
                per_question,
            });
        }
    }
    Ok(Evaluation {
        report: build_report(runs)?,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_transcript;
    use crate::embedding::{DeterministicProvider, EmbeddingProviderConfig, TokenEmbeddings};
    use crate::llm::{ScriptedBackend, ScriptedResponse};
    use crate::retrieval::build_index;
    use proptest::prelude::*;

    fn corpus() -> Corpus {
        Corpus::new(vec![
            parse_transcript(
                "Interviewer: How do you share?\nParticipant: I share my slides online so others can reuse them.",
                "T1",
            )
            .unwrap(),
            parse_transcript(
                "Interviewer: Tell me about your teaching.\nParticipant: You can also in your teaching have students \
connect with people outside the course in various ways.",
                "T2",
            )
            .unwrap(),
        ])
        .unwrap()
    }

    fn topic(label: &str, anecdote: Option<&str>) -> Topic {
        Topic {
            label: label.into(),
            description: String::new(),
            anecdote: anecdote.map(str::to_string),
            strategy: StrategyKind::Rag,
            question_id: "q1".into(),
            grounding: Grounding::Unchecked,
            source: None,
        }
    }

    fn question() -> ResearchQuestion {
        ResearchQuestion {
            id: "q1".into(),
            text: "How do instructors share and connect?".into(),
            sub_questions: vec![],
        }
    }

    fn det() -> DeterministicProvider {
        DeterministicProvider::new(EmbeddingProviderConfig::deterministic("det", 32, 7)).unwrap()
    }

    fn cfg(strategies: Vec<StrategyKind>) -> RunConfig {
        let mut c = RunConfig::new(strategies, vec![question()], EmbeddingProviderConfig::deterministic("det", 32, 7));
        c.chunking = ChunkConfig { size: 8, overlap: 2 };
        c.retrieval_k = 2;
        c
    }

    #[test]
    fn exact_grounding_reports_character_offset() {
        let c = corpus();
        let text = c.transcripts[1].full_text();
        let anecdote = "have students connect with people";
        let r = ground_anecdote(&topic("x", Some(anecdote)), &c.transcripts);
        assert_eq!(r.status, GroundingStatus::Grounded);
        assert_eq!(r.transcript_id.as_deref(), Some("T2"));
        let expected = text.find(anecdote).map(|b| text[..b].chars().count());
        assert_eq!(r.offset, expected);
        assert!(!r.normalized_match);
    }

    #[test]
    fn normalized_grounding_tolerates_case_and_punctuation() {
        let c = corpus();
        let r = ground_anecdote(&topic("x", Some("you can ALSO, in your teaching…")), &c.transcripts);
        assert_eq!(r.status, GroundingStatus::Grounded);
        assert!(r.normalized_match);
        let text = c.transcripts[1].full_text();
        let at = r.offset.unwrap();
        let tail: String = text.chars().skip(at).take(12).collect();
        assert_eq!(tail, "You can also");
    }

    #[test]
    fn fabricated_or_missing_anecdotes_are_ungrounded() {
        let c = corpus();
        let fabricated = ground_anecdote(&topic("x", Some("We never talked about budgets.")), &c.transcripts);
        assert_eq!(fabricated.status, GroundingStatus::Ungrounded);
        assert_eq!(ground_anecdote(&topic("x", None), &c.transcripts).status, GroundingStatus::Ungrounded);
        assert_eq!(ground_anecdote(&topic("x", Some("…")), &c.transcripts).status, GroundingStatus::Ungrounded);
    }

    #[test]
    fn normalization_maps_back_to_source_characters() {
        let (norm, origin) = normalize_for_grounding("  Hi,  “There”!");
        assert_eq!(norm, "hi there");
        assert_eq!(origin.len(), norm.chars().count());
        assert_eq!(origin[0], 2);
        assert_eq!(origin[3], 8);
    }

    fn set_of(topics: Vec<Topic>) -> TopicSet {
        TopicSet {
            strategy: StrategyKind::Rag,
            question_id: "q1".into(),
            topics,
            prompt_hash: String::new(),
        }
    }

    #[test]
    fn themes_single_topic_and_identical_labels() {
        let p = det();
        let one = aggregate_themes(&[set_of(vec![topic("Openness", None)])], &p, 0.85).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].member_topics.len(), 1);
        let twins = aggregate_themes(
            &[set_of(vec![topic("Open access", Some("short")), topic("Open access", Some("a longer quote"))])],
            &p,
            1.0,
        )
        .unwrap();
        assert_eq!(twins.len(), 1);
        assert_eq!(twins[0].member_topics.len(), 2);
        assert_eq!(twins[0].id, "theme-001");
    }

    /// Provider with hand-placed text vectors.
    struct Fixed {
        cfg: EmbeddingProviderConfig,
        table: Vec<(&'static str, Vec<f64>)>,
    }

    impl EmbeddingProvider for Fixed {
        fn config(&self) -> &EmbeddingProviderConfig {
            &self.cfg
        }

        fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, EmbeddingError> {
            let v = self
                .table
                .iter()
                .find(|(k, _)| *k == text)
                .map(|(_, v)| v.clone())
                .ok_or(EmbeddingError::EmptyText)?;
            TokenEmbeddings::from_rows("fixed", vec![text.to_string()], vec![v])
        }
    }

    #[test]
    fn single_link_chains_only_through_close_pairs() {
        // sim(A,B) = 0.9, sim(B,C) = 0.6, sim(A,C) ≈ 0.19 with θ = 0.85.
        let a = vec![1.0, 0.0];
        let b = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let c = vec![0.6 * 0.9 - 0.8 * (0.19f64).sqrt(), 0.6 * (0.19f64).sqrt() + 0.8 * 0.9];
        let fixed = Fixed {
            cfg: EmbeddingProviderConfig::deterministic("fixed", 2, 0),
            table: vec![("A", a), ("B", b), ("C", c)],
        };
        let themes = aggregate_themes(
            &[set_of(vec![topic("A", None), topic("B", Some("bb")), topic("C", None)])],
            &fixed,
            0.85,
        )
        .unwrap();
        let groups: Vec<Vec<usize>> = themes.iter().map(|t| t.member_topics.iter().map(|m| m.index).collect()).collect();
        assert_eq!(groups, [vec![0, 1], vec![2]]);
        assert_eq!(themes[0].representative_label, "B");
        assert_eq!(themes[1].representative_label, "C");
    }

    #[test]
    fn representative_ties_break_lexicographically() {
        let p = det();
        let themes = aggregate_themes(
            &[set_of(vec![topic("open access", Some("same")), topic("access open", Some("same"))])],
            &p,
            1.0,
        )
        .unwrap();
        assert_eq!(themes.len(), 1);
        assert_eq!(themes[0].representative_label, "access open");
    }

    #[test]
    fn per_question_scope_never_mixes_questions() {
        let p = det();
        let mut other = set_of(vec![topic("Openness", None)]);
        other.question_id = "q2".into();
        let sets = [set_of(vec![topic("Openness", None)]), other];
        assert_eq!(aggregate_themes_scoped(&sets, &p, 0.85, ThemeScope::AcrossQuestions).unwrap().len(), 1);
        let scoped = aggregate_themes_scoped(&sets, &p, 0.85, ThemeScope::PerQuestion).unwrap();
        assert_eq!(scoped.len(), 2);
        assert_eq!(scoped[1].question_id.as_deref(), Some("q2"));
    }

    #[test]
    fn truncation_cuts_the_tail() {
        assert_eq!(truncate_words("a b  c\nd", 2), ("a b", true));
        assert_eq!(truncate_words("a b", 5), ("a b", false));
    }

    #[test]
    fn rag_run_grounds_verbatim_chunk_quote() {
        let c = corpus();
        let config = cfg(vec![StrategyKind::Rag]);
        let p = det();
        let chunks = c.chunks(config.chunking).unwrap();
        let index = build_index(&chunks, &p).unwrap();
        let quote = &chunks[1].text;
        let backend = ScriptedBackend::new(
            "s",
            vec![ScriptedResponse {
                pattern: Some("Retrieved excerpts".into()),
                response: format!("TOPIC: Sharing\nANECDOTE: \"{quote}\""),
            }],
        );
        let audit = AuditLog::in_memory("r");
        let templates = Templates::default();
        let pipeline = Pipeline::new(&config, &c, &templates, &p, Some(&index), LlmClient::new(&backend, &audit), &audit).unwrap();
        let set = pipeline.run_strategy(StrategyKind::Rag, &question()).unwrap();
        assert_eq!(set.topics.len(), 1);
        assert_eq!(set.topics[0].grounding, Grounding::Grounded);
        assert_eq!(set.prompt_hash.len(), 64);
        assert_eq!(audit.count(AuditKind::Retrieval), 1);
        assert_eq!(audit.count(AuditKind::LlmCall), 1);
        assert_eq!(audit.count(AuditKind::Grounding), 1);
    }

    #[test]
    fn rag_without_index_fails() {
        let c = corpus();
        let config = cfg(vec![StrategyKind::Rag]);
        let p = det();
        let backend = ScriptedBackend::new("s", vec![]);
        let audit = AuditLog::in_memory("r");
        let templates = Templates::default();
        let pipeline = Pipeline::new(&config, &c, &templates, &p, None, LlmClient::new(&backend, &audit), &audit).unwrap();
        assert!(matches!(
            pipeline.run_strategy(StrategyKind::Rag, &question()),
            Err(PipelineError::MissingIndex)
        ));
    }

    #[test]
    fn fabricated_anecdote_is_flagged_and_empty_response_is_fine() {
        let c = corpus();
        let config = cfg(vec![StrategyKind::ZeroShot, StrategyKind::FewShot]);
        let p = det();
        let backend = ScriptedBackend::new(
            "s",
            vec![
                ScriptedResponse {
                    pattern: None,
                    response: "TOPIC: Budgets\nANECDOTE: \"Our budget was tripled last year.\"".into(),
                },
                ScriptedResponse {
                    pattern: None,
                    response: String::new(),
                },
            ],
        );
        let audit = AuditLog::in_memory("r");
        let templates = Templates::default();
        let pipeline = Pipeline::new(&config, &c, &templates, &p, None, LlmClient::new(&backend, &audit), &audit).unwrap();
        let out = pipeline.run().unwrap();
        assert_eq!(out.topic_sets.len(), 2);
        assert_eq!(out.topic_sets[0].topics[0].grounding, Grounding::Ungrounded);
        assert!(out.topic_sets[1].topics.is_empty());
        assert_eq!(out.themes.len(), 1);
    }

    #[test]
    fn non_rag_prompt_carries_the_transcripts_within_budget() {
        let c = corpus();
        let mut config = cfg(vec![StrategyKind::ZeroShot]);
        config.context_budget_words = 6;
        let p = det();
        let backend = ScriptedBackend::new("s", vec![ScriptedResponse { pattern: None, response: String::new() }]);
        let audit = AuditLog::in_memory("r");
        let templates = Templates::default();
        let pipeline = Pipeline::new(&config, &c, &templates, &p, None, LlmClient::new(&backend, &audit), &audit).unwrap();
        pipeline.run_strategy(StrategyKind::ZeroShot, &question()).unwrap();
        let rec = audit.records().into_iter().find(|r| r.kind == AuditKind::LlmCall).unwrap();
        let prompt = audit.prompt(rec.payload["prompt_hash"].as_str().unwrap()).unwrap();
        assert!(prompt.contains("### Transcript T1\nInterviewer: How do"));
        assert!(!prompt.contains("slides"));
        let parse = audit.records().into_iter().find(|r| r.kind == AuditKind::Parse).unwrap();
        assert_eq!(parse.payload["context_truncated"], true);
    }

    #[test]
    fn rationale_is_audited_and_failures_surface() {
        let c = corpus();
        let chunks = c.chunks(ChunkConfig { size: 8, overlap: 2 }).unwrap();
        let mut t = topic("Collaboration", Some("have students connect"));
        ground_anecdote(&t, &c.transcripts).apply(&mut t);
        let r = TopicRef {
            strategy: StrategyKind::Rag,
            question_id: "q1".into(),
            index: 0,
        };
        let backend = ScriptedBackend::new(
            "s",
            vec![ScriptedResponse {
                pattern: None,
                response: "Because participants repeatedly describe co-creation.".into(),
            }],
        );
        let audit = AuditLog::in_memory("r");
        let llm = LlmClient::new(&backend, &audit);
        let text = request_rationale(&r, &t, &llm, &LlmSettings::default(), &c, &chunks, &audit).unwrap();
        assert_eq!(text, "Because participants repeatedly describe co-creation.");
        let rec = audit.records().into_iter().find(|r| r.kind == AuditKind::Rationale).unwrap();
        assert_eq!(rec.payload["topic_id"], "rag/q1/0");
        let sources = rec.payload["source_chunks"].as_array().unwrap();
        assert!(!sources.is_empty());
        let llm_rec = audit.records().into_iter().find(|r| r.kind == AuditKind::LlmCall).unwrap();
        let prompt = audit.prompt(llm_rec.payload["prompt_hash"].as_str().unwrap()).unwrap();
        assert!(prompt.contains("Anecdote: \"have students connect\""));
        assert!(prompt.contains(sources[0].as_str().unwrap()));

        let bare = topic("Openness", None);
        assert!(!rationale_prompt(&bare, &[]).contains("Anecdote:"));
        let before = t.clone();
        let down = crate::llm::AnthropicBackend::new("http://127.0.0.1:1", "k");
        let llm = LlmClient::new(&down, &audit);
        assert!(matches!(
            request_rationale(&r, &t, &llm, &LlmSettings::default(), &c, &chunks, &audit),
            Err(PipelineError::Llm(LlmError::BackendUnavailable(_)))
        ));
        assert_eq!(t, before);
    }

    #[test]
    fn topic_ref_round_trip() {
        let r = TopicRef {
            strategy: StrategyKind::ChainOfThought,
            question_id: "rq/2".into(),
            index: 3,
        };
        assert_eq!(TopicRef::parse(&r.id()), None::<TopicRef>.or(TopicRef::parse("chain_of_thought/rq/2/3")));
        let simple = TopicRef {
            strategy: StrategyKind::FewShot,
            question_id: "q1".into(),
            index: 0,
        };
        assert_eq!(TopicRef::parse(&simple.id()), Some(simple));
        assert_eq!(TopicRef::parse("nope/q1/0"), None);
    }

    fn label_strategy() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            proptest::sample::select(vec!["open access", "sharing slides", "peer review", "licensing", "open access"]),
            1..8,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn themes_partition_topics_and_respect_threshold_order(labels in label_strategy(), hi in 0.5f64..1.0, lo_frac in 0.0f64..1.0) {
            let p = det();
            let set = set_of(labels.iter().map(|l| topic(l, None)).collect());
            let lo = (hi * lo_frac).max(0.01);
            let at_hi = aggregate_themes(std::slice::from_ref(&set), &p, hi).unwrap();
            let at_lo = aggregate_themes(std::slice::from_ref(&set), &p, lo).unwrap();
            let mut seen: Vec<usize> = at_hi.iter().flat_map(|t| t.member_topics.iter().map(|m| m.index)).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
            prop_assert!(at_lo.len() <= at_hi.len());
            let at_one = aggregate_themes(std::slice::from_ref(&set), &p, 1.0).unwrap();
            for theme in &at_one {
                let first = &labels[theme.member_topics[0].index];
                prop_assert!(theme.member_topics.iter().all(|m| &labels[m.index] == first));
            }
            let mut distinct = labels.clone();
            distinct.sort();
            distinct.dedup();
            prop_assert_eq!(at_one.len(), distinct.len());
        }

        #[test]
        fn grounded_topics_are_substrings(start in 0usize..60, len in 1usize..30) {
            let c = corpus();
            let text = c.transcripts[0].full_text();
            let chars: Vec<char> = text.chars().collect();
            let start = start.min(chars.len() - 1);
            let end = (start + len).min(chars.len());
            let quote: String = chars[start..end].iter().collect();
            let r = ground_anecdote(&topic("x", Some(&quote)), &c.transcripts);
            if normalize_for_grounding(&quote).0.is_empty() {
                prop_assert_eq!(r.status, GroundingStatus::Ungrounded);
            } else {
                prop_assert_eq!(r.status, GroundingStatus::Grounded);
                let t = c.get(r.transcript_id.as_deref().unwrap()).unwrap();
                let found = t.full_text().contains(quote.as_str())
                    || normalize_for_grounding(&t.full_text()).0.contains(&normalize_for_grounding(&quote).0);
                prop_assert!(found);
            }
        }
    }
}
