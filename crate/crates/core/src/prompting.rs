//! Prompt rendering for the four strategies and parsing of the line-oriented
//! topic format the prompts ask for.
//!
//! The response contract is a sequence of blocks:
//!
//! ```text
//! TOPIC: <label>
//! DESCRIPTION: <text>        (optional)
//! ANECDOTE: "<verbatim quote>" (optional)
//! ```
//!
//! The bundled instruction texts are reconstructions written for this tool;
//! override them with template files when the original wording matters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ResearchQuestion;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("the rag strategy needs retrieved context")]
    MissingContext,
    #[error("the {0} strategy does not take retrieved context")]
    UnexpectedContext(StrategyKind),
    #[error("template is for {template} but the prompt is for {requested}")]
    TemplateMismatch {
        template: StrategyKind,
        requested: StrategyKind,
    },
    #[error("invalid {strategy} template: {reason}")]
    InvalidTemplate {
        strategy: StrategyKind,
        reason: String,
    },
    #[error("response contains no TOPIC blocks")]
    MalformedResponse,
    #[error("unknown strategy `{0}` (expected zero_shot, few_shot, chain_of_thought or rag)")]
    UnknownStrategy(String),
    #[error("template file {path}: {reason}")]
    TemplateFile { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    FewShot,
    ChainOfThought,
    Rag,
}

impl StrategyKind {
    /// Execution order within a run.
    pub const ALL: [StrategyKind; 4] = [Self::ZeroShot, Self::FewShot, Self::ChainOfThought, Self::Rag];

    /// Row order of the score table.
    pub const TABLE_ORDER: [StrategyKind; 4] = [Self::ChainOfThought, Self::FewShot, Self::ZeroShot, Self::Rag];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::FewShot => "few_shot",
            Self::ChainOfThought => "chain_of_thought",
            Self::Rag => "rag",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::ZeroShot => "Zero Shot",
            Self::FewShot => "Few Shot",
            Self::ChainOfThought => "Chain of Thought",
            Self::Rag => "RAG",
        }
    }

    pub fn table_rank(self) -> usize {
        Self::TABLE_ORDER.iter().position(|s| *s == self).unwrap_or(usize::MAX)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PromptError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub topic: String,
    pub anecdote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub strategy: StrategyKind,
    pub instruction_text: String,
    #[serde(default)]
    pub example_pairs: Vec<ExamplePair>,
    #[serde(default)]
    pub reasoning_steps: Vec<String>,
}

#[derive(Deserialize)]
struct TemplateFile {
    instruction_text: String,
    #[serde(default)]
    example_pairs: Vec<ExamplePair>,
    #[serde(default)]
    reasoning_steps: Vec<String>,
}

const ANALYST_PREAMBLE: &str = "You are a research assistant helping with a deductive thematic analysis \
of semi-structured interview transcripts. An expert researcher will review your output.";

pub const DEFAULT_FEW_SHOT_TOPIC: &str = "Collaboration: Co-creating resources and connecting with others";
pub const DEFAULT_FEW_SHOT_ANECDOTE: &str = "You can also in your teaching have students connect with people outside the \
course in various ways. Like, maybe some people outside the course are commenting on blogs and student are getting \
in a conversation around that.";

pub const DEFAULT_REASONING_STEPS: [&str; 4] = [
    "Read the supplied interview text carefully.",
    "List the candidate topics the participants talk about.",
    "Select the topics that answer the research question and its sub-questions.",
    "For each selected topic, attach one verbatim anecdote quoted from the supplied text.",
];

/// Appended to every prompt.
pub const OUTPUT_FORMAT_BLOCK: &str = "Output format:
Respond only with topic blocks, one block per topic, using exactly these lines:
TOPIC: <short topic label>
DESCRIPTION: <one sentence describing the topic>
ANECDOTE: \"<exact quote copied from the supplied text>\"
Copy every anecdote word for word from the supplied text. Do not write anything else.";

impl PromptTemplate {
    pub fn default_for(strategy: StrategyKind) -> Self {
        let (instruction, example_pairs, reasoning_steps) = match strategy {
            StrategyKind::ZeroShot => (
                "Read the interview transcripts below and identify the key topics that answer the research question.",
                vec![],
                vec![],
            ),
            StrategyKind::FewShot => (
                "Read the interview transcripts below and identify the key topics that answer the research question. \
The examples show the kind of topic and anecdote expected.",
                vec![ExamplePair {
                    topic: DEFAULT_FEW_SHOT_TOPIC.to_string(),
                    anecdote: DEFAULT_FEW_SHOT_ANECDOTE.to_string(),
                }],
                vec![],
            ),
            StrategyKind::ChainOfThought => (
                "Read the interview transcripts below and identify the key topics that answer the research question. \
Follow the steps below in order.",
                vec![],
                DEFAULT_REASONING_STEPS.iter().map(|s| s.to_string()).collect(),
            ),
            StrategyKind::Rag => (
                "The excerpts below were retrieved from the interview transcripts because they are the most relevant \
to the research question. Using only these excerpts, identify the key topics that answer the research question.",
                vec![],
                vec![],
            ),
        };
        Self {
            strategy,
            instruction_text: format!("{ANALYST_PREAMBLE}\n{instruction}"),
            example_pairs,
            reasoning_steps,
        }
    }

    pub fn from_json(strategy: StrategyKind, json: &str) -> Result<Self, PromptError> {
        let file: TemplateFile = serde_json::from_str(json).map_err(|e| PromptError::TemplateFile {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        let template = Self {
            strategy,
            instruction_text: file.instruction_text,
            example_pairs: file.example_pairs,
            reasoning_steps: file.reasoning_steps,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(strategy: StrategyKind, path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::TemplateFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(strategy, &raw).map_err(|e| match e {
            PromptError::TemplateFile { reason, .. } => PromptError::TemplateFile {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::InvalidTemplate {
            strategy: self.strategy,
            reason: reason.to_string(),
        };
        if self.instruction_text.trim().is_empty() {
            return Err(invalid("empty instruction_text"));
        }
        let has_examples = !self.example_pairs.is_empty();
        let has_steps = !self.reasoning_steps.is_empty();
        match self.strategy {
            StrategyKind::FewShot if !has_examples => Err(invalid("needs at least one example pair")),
            StrategyKind::ChainOfThought if self.reasoning_steps.len() < 2 => {
                Err(invalid("needs at least two reasoning steps"))
            }
            StrategyKind::ZeroShot | StrategyKind::Rag if has_examples || has_steps => {
                Err(invalid("must not carry example pairs or reasoning steps"))
            }
            StrategyKind::FewShot if has_steps => Err(invalid("must not carry reasoning steps")),
            StrategyKind::ChainOfThought if has_examples => Err(invalid("must not carry example pairs")),
            _ => Ok(()),
        }
    }
}

/// A retrieved chunk as it appears in a rag prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPassage {
    pub chunk_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy)]
pub enum PromptContext<'a> {
    None,
    /// Concatenated transcripts for the non-rag strategies.
    Corpus(&'a str),
    Retrieved(&'a [ContextPassage]),
}

pub fn render_prompt(
    strategy: StrategyKind,
    question: &ResearchQuestion,
    template: &PromptTemplate,
    context: PromptContext<'_>,
) -> Result<String, PromptError> {
    if template.strategy != strategy {
        return Err(PromptError::TemplateMismatch {
            template: template.strategy,
            requested: strategy,
        });
    }
    template.validate()?;
    match (strategy, context) {
        (StrategyKind::Rag, PromptContext::Retrieved(_)) => {}
        (StrategyKind::Rag, _) => return Err(PromptError::MissingContext),
        (other, PromptContext::Retrieved(_)) => return Err(PromptError::UnexpectedContext(other)),
        _ => {}
    }

    let mut out = String::new();
    out.push_str(template.instruction_text.trim_end());
    out.push_str("\n\nResearch question: ");
    out.push_str(question.text.trim());
    out.push('\n');
    if !question.sub_questions.is_empty() {
        out.push_str("Sub-questions:\n");
        for sub in &question.sub_questions {
            out.push_str("- ");
            out.push_str(sub.trim());
            out.push('\n');
        }
    }

    if strategy == StrategyKind::FewShot {
        out.push_str("\nExamples:\n");
        for pair in &template.example_pairs {
            out.push_str(&format!("TOPIC: {}\nANECDOTE: \"{}\"\n", pair.topic, pair.anecdote));
        }
    }
    if strategy == StrategyKind::ChainOfThought {
        out.push_str("\nSteps:\n");
        for (i, step) in template.reasoning_steps.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, step));
        }
    }
    match context {
        PromptContext::Retrieved(passages) => {
            out.push_str("\nRetrieved excerpts:\n");
            for p in passages {
                out.push_str(&format!("[{}]\n{}\n", p.chunk_id, p.text));
            }
        }
        PromptContext::Corpus(text) if !text.trim().is_empty() => {
            out.push_str("\nInterview transcripts:\n");
            out.push_str(text.trim_end());
            out.push('\n');
        }
        _ => {}
    }
    out.push('\n');
    out.push_str(OUTPUT_FORMAT_BLOCK);
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    #[default]
    Unchecked,
    Grounded,
    Ungrounded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLocation {
    pub transcript_id: String,
    /// Character offset into the transcript's full text.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub label: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub anecdote: Option<String>,
    pub strategy: StrategyKind,
    pub question_id: String,
    #[serde(default)]
    pub grounding: Grounding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceLocation>,
}

impl Topic {
    /// Text used for similarity between topics and for scoring.
    pub fn summary_text(&self) -> String {
        if self.description.trim().is_empty() {
            self.label.clone()
        } else {
            format!("{} {}", self.label, self.description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    pub strategy: StrategyKind,
    pub question_id: String,
    pub topics: Vec<Topic>,
    #[serde(default)]
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTopics {
    pub set: TopicSet,
    /// Non-empty lines that were not part of any topic block.
    pub warnings: usize,
}

enum Field<'a> {
    Topic(&'a str),
    Description(&'a str),
    Anecdote(&'a str),
}

fn strip_list_marker(line: &str) -> &str {
    let trimmed = line.trim_start_matches(['-', '*', '•', ' ']);
    let digits = trimmed.trim_start_matches(|c: char| c.is_ascii_digit());
    if digits.len() < trimmed.len() {
        if let Some(rest) = digits.strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    trimmed
}

fn field(line: &str) -> Option<Field<'_>> {
    let line = strip_list_marker(line.trim());
    let (key, value) = line.split_once(':')?;
    let value = value.trim();
    match key.trim().to_ascii_uppercase().as_str() {
        "TOPIC" => Some(Field::Topic(value)),
        "DESCRIPTION" => Some(Field::Description(value)),
        "ANECDOTE" => Some(Field::Anecdote(value)),
        _ => None,
    }
}

fn unquote(value: &str) -> &str {
    let v = value.trim();
    let mut chars = v.chars();
    match (chars.next(), chars.next_back()) {
        (Some(open), Some(close)) if matches!(open, '"' | '“') && matches!(close, '"' | '”') => {
            &v[open.len_utf8()..v.len() - close.len_utf8()]
        }
        _ => v,
    }
}

pub fn parse_topics(response: &str, strategy: StrategyKind, question_id: &str) -> Result<ParsedTopics, PromptError> {
    let mut topics: Vec<Topic> = Vec::new();
    let mut warnings = 0;
    // False while lines belong to a block whose TOPIC line had no label.
    let mut in_block = false;
    for line in response.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match field(line) {
            Some(Field::Topic(label)) if !label.is_empty() => {
                topics.push(Topic {
                    label: label.to_string(),
                    description: String::new(),
                    anecdote: None,
                    strategy,
                    question_id: question_id.to_string(),
                    grounding: Grounding::Unchecked,
                    source: None,
                });
                in_block = true;
            }
            Some(Field::Description(text)) if in_block => {
                let topic = topics.last_mut().expect("in_block implies a topic");
                if topic.description.is_empty() {
                    topic.description = text.to_string();
                } else {
                    warnings += 1;
                }
            }
            Some(Field::Anecdote(quote)) if in_block => {
                let topic = topics.last_mut().expect("in_block implies a topic");
                let quote = unquote(quote);
                if topic.anecdote.is_none() && !quote.trim().is_empty() {
                    topic.anecdote = Some(quote.to_string());
                } else {
                    warnings += 1;
                }
            }
            Some(Field::Topic(_)) => {
                in_block = false;
                warnings += 1;
            }
            _ => warnings += 1,
        }
    }
    if topics.is_empty() && !response.trim().is_empty() {
        return Err(PromptError::MalformedResponse);
    }
    Ok(ParsedTopics {
        set: TopicSet {
            strategy,
            question_id: question_id.to_string(),
            topics,
            prompt_hash: String::new(),
        },
        warnings,
    })
}

/// Writes a topic set in the response format; `parse_topics` reads it back.
pub fn format_topics(set: &TopicSet) -> String {
    let mut out = String::new();
    for t in &set.topics {
        out.push_str(&format!("TOPIC: {}\n", t.label));
        if !t.description.is_empty() {
            out.push_str(&format!("DESCRIPTION: {}\n", t.description));
        }
        if let Some(a) = &t.anecdote {
            out.push_str(&format!("ANECDOTE: \"{a}\"\n"));
        }
    }
    out
}
