//! Transcript ingestion, word tokenization and knowledge-base chunking.
//!
//! Plain-text transcripts use a speaker-prefix layout: a line such as
//! `Participant: I share my slides online.` opens a new turn and any following
//! line without a prefix continues the current turn. JSON transcripts carry the
//! turns directly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_CHUNK_OVERLAP: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("transcript `{0}` is empty")]
    EmptyTranscript(String),
    #[error("transcript `{0}` has no `Speaker: text` lines")]
    NoTurns(String),
    #[error("invalid transcript `{id}`: {reason}")]
    InvalidTranscript { id: String, reason: String },
    #[error("invalid chunking: size {size}, overlap {overlap} (need size >= 1 and overlap < size)")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("duplicate transcript id `{0}`")]
    DuplicateTranscriptId(String),
    #[error("research question `{0}` has empty text")]
    EmptyQuestion(String),
    #[error("gold topics for `{0}` are empty")]
    EmptyGoldTopics(String),
    #[error("gold topics refer to unknown research question `{0}`")]
    UnknownQuestion(String),
    #[error("no transcript files found under {0}")]
    NoInputFiles(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub source_path: String,
}

impl Transcript {
    /// The text the model sees and anecdotes are grounded against: one
    /// `Speaker: text` line per turn.
    pub fn full_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidTranscript {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.turns.is_empty() {
            return Err(invalid("no turns"));
        }
        if self.turns.iter().any(|t| t.text.trim().is_empty()) {
            return Err(invalid("turn with empty text"));
        }
        Ok(())
    }
}

fn speaker_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z][\w ]*):\s").expect("static regex"))
}

pub fn parse_transcript(raw_text: &str, id: &str) -> Result<Transcript, CorpusError> {
    if raw_text.trim().is_empty() {
        return Err(CorpusError::EmptyTranscript(id.to_string()));
    }
    let mut turns: Vec<Turn> = Vec::new();
    for line in raw_text.lines() {
        if let Some(caps) = speaker_prefix().captures(line) {
            let prefix_len = caps.get(0).map_or(0, |m| m.end());
            turns.push(Turn {
                speaker: caps[1].trim().to_string(),
                text: line[prefix_len..].trim().to_string(),
            });
        } else if let Some(current) = turns.last_mut() {
            let extra = line.trim();
            if extra.is_empty() {
                continue;
            }
            if !current.text.is_empty() {
                current.text.push(' ');
            }
            current.text.push_str(extra);
        }
        // Lines before the first speaker prefix (headers, titles) are dropped.
    }
    turns.retain(|t| !t.text.is_empty());
    if turns.is_empty() {
        return Err(CorpusError::NoTurns(id.to_string()));
    }
    Ok(Transcript {
        id: id.to_string(),
        turns,
        source_path: String::new(),
    })
}

/// A token with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub token: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased maximal alphanumeric runs with their byte offsets.
pub fn tokenize_spans(text: &str) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            push_span(&mut spans, text, s, i);
        }
    }
    if let Some(s) = start {
        push_span(&mut spans, text, s, text.len());
    }
    spans
}

fn push_span(spans: &mut Vec<TokenSpan>, text: &str, start: usize, end: usize) {
    // Some lowercase mappings emit combining marks; keep only alphanumerics so
    // re-tokenizing a token yields the same token.
    let token: String = text[start..end]
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect();
    if !token.is_empty() {
        spans.push(TokenSpan { token, start, end });
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|s| s.token).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub size: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.size < 1 || self.overlap >= self.size {
            return Err(CorpusError::InvalidChunking {
                size: self.size,
                overlap: self.overlap,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub transcript_id: String,
    /// Verbatim slice of the transcript text from the first to the last token.
    pub text: String,
    /// Token index range, end-exclusive.
    pub token_span: (usize, usize),
}

impl Chunk {
    pub fn contains_token(&self, index: usize) -> bool {
        self.token_span.0 <= index && index < self.token_span.1
    }
}

pub fn chunk_id(transcript_id: &str, start: usize) -> String {
    format!("{transcript_id}#{start}")
}

pub fn chunk_transcript(t: &Transcript, cfg: ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    let text = t.full_text();
    let spans = tokenize_spans(&text);
    let n = spans.len();
    let stride = cfg.size - cfg.overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + cfg.size).min(n);
        chunks.push(Chunk {
            id: chunk_id(&t.id, start),
            transcript_id: t.id.clone(),
            text: text[spans[start].start..spans[end - 1].end].to_string(),
            token_span: (start, end),
        });
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResearchQuestion {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub sub_questions: Vec<String>,
}

impl ResearchQuestion {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::EmptyQuestion(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTopicSet {
    pub question_id: String,
    pub topics: Vec<String>,
}

impl GoldTopicSet {
    pub fn validate(&self, questions: &[ResearchQuestion]) -> Result<(), CorpusError> {
        if self.topics.iter().all(|t| t.trim().is_empty()) {
            return Err(CorpusError::EmptyGoldTopics(self.question_id.clone()));
        }
        if !questions.iter().any(|q| q.id == self.question_id) {
            return Err(CorpusError::UnknownQuestion(self.question_id.clone()));
        }
        Ok(())
    }
}

/// Every transcript of one study, in load order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub transcripts: Vec<Transcript>,
}

impl Corpus {
    pub fn new(transcripts: Vec<Transcript>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for t in &transcripts {
            t.validate()?;
            if !seen.insert(t.id.as_str()) {
                return Err(CorpusError::DuplicateTranscriptId(t.id.clone()));
            }
        }
        Ok(Self { transcripts })
    }

    /// Loads transcripts from files and directories. Directories contribute
    /// their `.txt` and `.json` files in name order.
    pub fn load(paths: &[PathBuf]) -> Result<Self, CorpusError> {
        let files = expand_transcript_paths(paths)?;
        let transcripts = files
            .iter()
            .map(|p| load_transcript(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(transcripts)
    }

    pub fn get(&self, id: &str) -> Option<&Transcript> {
        self.transcripts.iter().find(|t| t.id == id)
    }

    pub fn chunks(&self, cfg: ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
        let mut all = Vec::new();
        for t in &self.transcripts {
            all.extend(chunk_transcript(t, cfg)?);
        }
        Ok(all)
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }
}

pub fn expand_transcript_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let entries = fs::read_dir(path).map_err(|source| CorpusError::Io {
                path: path.clone(),
                source,
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("txt") | Some("json")
                        )
                })
                .collect();
            if found.is_empty() {
                return Err(CorpusError::NoInputFiles(path.clone()));
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

pub fn load_transcript(path: &Path) -> Result<Transcript, CorpusError> {
    let raw = read_to_string(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("transcript")
        .to_string();
    let mut transcript = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let t: Transcript = parse_json(path, &raw)?;
        t.validate()?;
        t
    } else {
        parse_transcript(&raw, &stem)?
    };
    transcript.source_path = path.display().to_string();
    Ok(transcript)
}

/// Accepts either a single question object or a list of them.
pub fn load_questions(path: &Path) -> Result<Vec<ResearchQuestion>, CorpusError> {
    let questions: Vec<ResearchQuestion> = load_one_or_many(path)?;
    for q in &questions {
        q.validate()?;
    }
    Ok(questions)
}

/// Accepts either a single gold-topic object or a list of them.
pub fn load_gold(path: &Path) -> Result<Vec<GoldTopicSet>, CorpusError> {
    load_one_or_many(path)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

fn load_one_or_many<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let raw = read_to_string(path)?;
    Ok(match parse_json::<OneOrMany<T>>(path, &raw)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(v) => vec![v],
    })
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, raw: &str) -> Result<T, CorpusError> {
    serde_json::from_str(raw).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}
