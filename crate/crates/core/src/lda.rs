//! Latent Dirichlet allocation baseline fitted by collapsed Gibbs sampling.
//!
//! Each token's topic is resampled from
//!
//! ```text
//! p(z = k | rest) ∝ (n_dk + α) · (n_kw + β) / (n_k + Vβ)
//! ```
//!
//! with the token's own assignment removed from the counts. After the last
//! sweep, `phi[k][w] = (n_kw + β) / (n_k + Vβ)` and
//! `theta[d][k] = (n_dk + α) / (n_d + Kα)`.
//!
//! Sampling draws from [`Lcg64`]: integer state, one 53-bit uniform per token,
//! and a linear scan of the cumulative weights, so a fit is reproducible from
//! `(corpus, K, α, β, iterations, seed)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Transcript};
use crate::rng::Lcg64;

pub const DEFAULT_TOPICS: usize = 5;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_MIN_TOKEN_LEN: usize = 3;
pub const STOPWORDS_ID: &str = "en-interview-v1";

/// English function words plus conversational fillers common in interview speech.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "actually", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are",
    "aren", "around", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "couldn", "did", "didn", "do", "does", "doesn", "doing", "don", "down", "during", "each",
    "even", "few", "for", "from", "further", "get", "gets", "getting", "got", "gonna", "had", "hadn", "has",
    "hasn", "have", "haven", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how",
    "i", "if", "in", "into", "is", "isn", "it", "its", "itself", "just", "kind", "know", "like", "lot", "maybe",
    "me", "mean", "more", "most", "much", "must", "my", "myself", "no", "nor", "not", "now", "of", "off", "okay",
    "on", "once", "one", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "pretty",
    "probably", "quite", "really", "right", "said", "same", "say", "see", "she", "should", "shouldn", "so",
    "some", "something", "sort", "such", "sure", "than", "that", "thats", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "thing", "things", "think", "this", "those", "through",
    "to", "too", "uh", "um", "under", "until", "up", "us", "very", "was", "wasn", "way", "we", "well", "were",
    "weren", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with", "won", "would",
    "wouldn", "yeah", "yes", "you", "your", "yours", "yourself", "yourselves",
];

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("vocabulary is empty after preprocessing")]
    EmptyVocabulary,
    #[error("topic {topic} out of range for a {k}-topic model")]
    TopicOutOfRange { topic: usize, k: usize },
    #[error("document {doc} out of range for a {d}-document model")]
    DocOutOfRange { doc: usize, d: usize },
    #[error("invalid lda parameters: {0}")]
    InvalidParams(String),
    #[error("unknown stopword list `{0}`")]
    UnknownStopwordList(String),
    #[error("count tables disagree with assignments: {0}")]
    CountMismatch(String),
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
pub struct Preprocessing {
    pub lowercase: bool,
    pub stopword_list: String,
    pub min_token_len: usize,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            lowercase: true,
            stopword_list: STOPWORDS_ID.into(),
            min_token_len: DEFAULT_MIN_TOKEN_LEN,
        }
    }
}

impl Preprocessing {
    fn stopwords(&self) -> Result<BTreeSet<&'static str>, LdaError> {
        match self.stopword_list.as_str() {
            STOPWORDS_ID => Ok(STOPWORDS.iter().copied().collect()),
            "none" => Ok(BTreeSet::new()),
            other => Err(LdaError::UnknownStopwordList(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowCorpus {
    /// Sorted, unique.
    pub vocab: Vec<String>,
    pub docs: Vec<Vec<usize>>,
    pub doc_ids: Vec<String>,
    pub preprocessing: Preprocessing,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BowCorpus {
    /// Builds a corpus from already-tokenized documents; vocabulary ids follow
    /// sorted word order.
    pub fn from_token_docs(
        doc_ids: Vec<String>,
        docs: Vec<Vec<String>>,
        preprocessing: Preprocessing,
    ) -> Result<Self, LdaError> {
        let vocab: Vec<String> = docs.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if vocab.is_empty() {
            return Err(LdaError::EmptyVocabulary);
        }
        let ids: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let encoded: Vec<Vec<usize>> = docs.iter().map(|d| d.iter().map(|w| ids[w.as_str()]).collect()).collect();
        let warnings = doc_ids
            .iter()
            .zip(&encoded)
            .filter(|(_, d)| d.is_empty())
            .map(|(id, _)| format!("document `{id}` is empty after preprocessing"))
            .collect();
        Ok(Self {
            vocab,
            docs: encoded,
            doc_ids,
            preprocessing,
            warnings,
        })
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// One document per transcript, built from the spoken text only.
pub fn build_bow(transcripts: &[Transcript], preprocessing: &Preprocessing) -> Result<BowCorpus, LdaError> {
    let stop = preprocessing.stopwords()?;
    let docs = transcripts
        .iter()
        .map(|t| {
            t.turns
                .iter()
                .flat_map(|turn| tokenize(&turn.text))
                .map(|w| if preprocessing.lowercase { w.to_lowercase() } else { w })
                .filter(|w| w.chars().count() >= preprocessing.min_token_len && !stop.contains(w.as_str()))
                .collect()
        })
        .collect();
    BowCorpus::from_token_docs(
        transcripts.iter().map(|t| t.id.clone()).collect(),
        docs,
        preprocessing.clone(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl LdaParams {
    /// Conventional settings for `k` topics: α = 50/K, β = 0.01.
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            alpha: 50.0 / k.max(1) as f64,
            beta: DEFAULT_BETA,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LdaError> {
        if self.k == 0 {
            return Err(LdaError::InvalidParams("K must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(LdaError::InvalidParams("iterations must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LdaError::InvalidParams("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LdaParams {
    fn default() -> Self {
        Self::with_k(DEFAULT_TOPICS)
    }
}

/// Count tables and assignments of a running sampler.
pub struct GibbsSampler<'c> {
    corpus: &'c BowCorpus,
    k: usize,
    alpha: f64,
    beta: f64,
    z: Vec<Vec<usize>>,
    n_dk: Vec<Vec<u32>>,
    n_kw: Vec<Vec<u32>>,
    n_k: Vec<u32>,
    rng: Lcg64,
    weights: Vec<f64>,
}

impl<'c> GibbsSampler<'c> {
    /// Random initial assignments drawn uniformly from the seeded generator.
    pub fn new(corpus: &'c BowCorpus, params: &LdaParams) -> Result<Self, LdaError> {
        params.validate()?;
        if corpus.vocab.is_empty() {
            return Err(LdaError::EmptyVocabulary);
        }
        let (k, v) = (params.k, corpus.vocab.len());
        let mut rng = Lcg64::new(params.seed);
        let mut n_dk = vec![vec![0u32; k]; corpus.docs.len()];
        let mut n_kw = vec![vec![0u32; v]; k];
        let mut n_k = vec![0u32; k];
        let z = corpus
            .docs
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let t = rng.below(k as u64) as usize;
                        n_dk[d][t] += 1;
                        n_kw[t][w] += 1;
                        n_k[t] += 1;
                        t
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            corpus,
            k,
            alpha: params.alpha,
            beta: params.beta,
            z,
            n_dk,
            n_kw,
            n_k,
            rng,
            weights: vec![0.0; k],
        })
    }

    /// Resamples every token once, documents and positions in order.
    pub fn sweep(&mut self) {
        let v_beta = self.corpus.vocab.len() as f64 * self.beta;
        for (d, doc) in self.corpus.docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = self.z[d][i];
                self.n_dk[d][old] -= 1;
                self.n_kw[old][w] -= 1;
                self.n_k[old] -= 1;

                let mut total = 0.0;
                for t in 0..self.k {
                    let p = (self.n_dk[d][t] as f64 + self.alpha) * (self.n_kw[t][w] as f64 + self.beta)
                        / (self.n_k[t] as f64 + v_beta);
                    total += p;
                    self.weights[t] = total;
                }
                let u = self.rng.next_f64() * total;
                let new = self.weights.iter().position(|&c| u < c).unwrap_or(self.k - 1);

                self.z[d][i] = new;
                self.n_dk[d][new] += 1;
                self.n_kw[new][w] += 1;
                self.n_k[new] += 1;
            }
        }
    }

    /// Recounts from the assignments and compares against the running tables.
    pub fn check_counts(&self) -> Result<(), LdaError> {
        let total = self.corpus.token_count() as u64;
        let sum_kw: u64 = self.n_kw.iter().flatten().map(|&c| c as u64).sum();
        let sum_dk: u64 = self.n_dk.iter().flatten().map(|&c| c as u64).sum();
        let sum_k: u64 = self.n_k.iter().map(|&c| c as u64).sum();
        if sum_kw != total || sum_dk != total || sum_k != total {
            return Err(LdaError::CountMismatch(format!(
                "tokens {total}, topic-word {sum_kw}, doc-topic {sum_dk}, topic {sum_k}"
            )));
        }
        let mut n_dk = vec![vec![0u32; self.k]; self.corpus.docs.len()];
        let mut n_kw = vec![vec![0u32; self.corpus.vocab.len()]; self.k];
        for (d, doc) in self.corpus.docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let t = self.z[d][i];
                if t >= self.k {
                    return Err(LdaError::CountMismatch(format!("assignment {t} outside [0, {})", self.k)));
                }
                n_dk[d][t] += 1;
                n_kw[t][w] += 1;
            }
        }
        let n_k: Vec<u32> = n_kw.iter().map(|row| row.iter().sum()).collect();
        if n_dk != self.n_dk || n_kw != self.n_kw || n_k != self.n_k {
            return Err(LdaError::CountMismatch("tables differ from a recount".into()));
        }
        Ok(())
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.z
    }

    fn into_model(self, params: &LdaParams) -> LdaModel {
        let v = self.corpus.vocab.len();
        let v_beta = v as f64 * self.beta;
        let k_alpha = self.k as f64 * self.alpha;
        let phi = (0..self.k)
            .map(|t| {
                let denom = self.n_k[t] as f64 + v_beta;
                self.n_kw[t].iter().map(|&c| (c as f64 + self.beta) / denom).collect()
            })
            .collect();
        let theta = self
            .n_dk
            .iter()
            .zip(&self.corpus.docs)
            .map(|(row, doc)| {
                let denom = doc.len() as f64 + k_alpha;
                row.iter().map(|&c| (c as f64 + self.alpha) / denom).collect()
            })
            .collect();
        LdaModel {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            seed: params.seed,
            iterations: params.iterations,
            vocab: self.corpus.vocab.clone(),
            doc_ids: self.corpus.doc_ids.clone(),
            phi,
            theta,
            assignments: self.z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub iterations: usize,
    pub vocab: Vec<String>,
    pub doc_ids: Vec<String>,
    /// K × V topic-word distributions.
    pub phi: Vec<Vec<f64>>,
    /// D × K document-topic distributions.
    pub theta: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
}

pub fn fit(corpus: &BowCorpus, params: &LdaParams) -> Result<LdaModel, LdaError> {
    fit_observed(corpus, params, |_, _| Ok(()))
}

/// Like [`fit`], calling `after_sweep(sampler, sweep_index)` after each sweep.
pub fn fit_observed<F>(corpus: &BowCorpus, params: &LdaParams, mut after_sweep: F) -> Result<LdaModel, LdaError>
where
    F: FnMut(&GibbsSampler<'_>, usize) -> Result<(), LdaError>,
{
    let mut sampler = GibbsSampler::new(corpus, params)?;
    for it in 0..params.iterations {
        sampler.sweep();
        after_sweep(&sampler, it)?;
    }
    Ok(sampler.into_model(params))
}

impl LdaModel {
    /// The `n` most probable words of `topic`, ties in vocabulary order.
    pub fn top_words(&self, topic: usize, n: usize) -> Result<Vec<(String, f64)>, LdaError> {
        let row = self.phi.get(topic).ok_or(LdaError::TopicOutOfRange { topic, k: self.k })?;
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| self.vocab[a].cmp(&self.vocab[b])));
        Ok(idx.into_iter().take(n).map(|i| (self.vocab[i].clone(), row[i])).collect())
    }

    pub fn dominant_topic(&self, doc: usize) -> Result<usize, LdaError> {
        let row = self.theta.get(doc).ok_or(LdaError::DocOutOfRange {
            doc,
            d: self.theta.len(),
        })?;
        Ok(argmax(row))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), LdaError> {
        fs::write(path, self.to_json()).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LdaError> {
        let text = fs::read_to_string(path).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| LdaError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `topic,rank,word,probability`, `n` rows per topic.
    pub fn keywords_csv(&self, n: usize) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["topic", "rank", "word", "probability"]).expect("in-memory write");
        for t in 0..self.k {
            for (rank, (word, p)) in self.top_words(t, n).expect("topic in range").into_iter().enumerate() {
                w.write_record([(t + 1).to_string(), (rank + 1).to_string(), word, format!("{p:.6}")])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}
