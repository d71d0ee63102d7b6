//! Greedy token-matching precision, recall and F1 over contextual token
//! embeddings, and the strategy-by-model score report.
//!
//! With reference tokens `x` (gold topics) and candidate tokens `x̂` (generated
//! topics), each unit-normalized:
//!
//! - recall    = mean over `x_i` of `max_j x_i · x̂_j`
//! - precision = mean over `x̂_j` of `max_i x̂_j · x_i`
//! - F1        = 2PR / (P + R), or 0 when P + R = 0
//!
//! Because rows are unit vectors the dot products are cosine similarities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GoldTopicSet;
use crate::embedding::{EmbeddingError, EmbeddingProvider, TokenEmbeddings};
use crate::prompting::{StrategyKind, Topic, TopicSet};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty token set")]
    EmptyTokenSet,
    #[error("embeddings come from different models: `{0}` vs `{1}`")]
    ModelMismatch(String, String),
    #[error("empty topic set")]
    EmptyTopicSet,
    #[error("duplicate report cell ({strategy}, {model_id})")]
    DuplicateCell { strategy: StrategyKind, model_id: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn check_pair(a: &TokenEmbeddings, b: &TokenEmbeddings) -> Result<(), MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyTokenSet);
    }
    if a.model_id != b.model_id {
        return Err(MetricsError::ModelMismatch(a.model_id.clone(), b.model_id.clone()));
    }
    if a.dimension != b.dimension {
        return Err(MetricsError::DimensionMismatch(a.dimension, b.dimension));
    }
    Ok(())
}

/// Mean over the rows of `from` of their best match among the rows of `to`.
fn mean_best_match(from: &TokenEmbeddings, to: &TokenEmbeddings) -> f64 {
    let total: f64 = from
        .rows()
        .map(|f| to.rows().map(|t| dot(f, t)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

pub fn greedy_recall(reference: &TokenEmbeddings, candidate: &TokenEmbeddings) -> Result<f64, MetricsError> {
    check_pair(reference, candidate)?;
    Ok(mean_best_match(reference, candidate))
}

pub fn greedy_precision(reference: &TokenEmbeddings, candidate: &TokenEmbeddings) -> Result<f64, MetricsError> {
    check_pair(reference, candidate)?;
    Ok(mean_best_match(candidate, reference))
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    let sum = precision + recall;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PairScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn score_embeddings(reference: &TokenEmbeddings, candidate: &TokenEmbeddings) -> Result<PairScore, MetricsError> {
    Ok(PairScore::from_pr(
        greedy_precision(reference, candidate)?,
        greedy_recall(reference, candidate)?,
    ))
}

/// Integer percent, rounding halves away from zero.
pub fn percent(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

pub fn topic_line(topic: &Topic) -> String {
    if topic.description.trim().is_empty() {
        topic.label.clone()
    } else {
        format!("{} — {}", topic.label, topic.description)
    }
}

/// One document per side: lines sorted lexicographically, joined by newlines.
pub fn topic_document(lines: &[String]) -> String {
    let mut sorted = lines.to_vec();
    sorted.sort();
    sorted.join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDetail {
    pub model_id: String,
    pub score: PairScore,
    /// Gold lines, sorted.
    pub reference_lines: Vec<String>,
    /// Generated lines, sorted.
    pub candidate_lines: Vec<String>,
    /// F1 of each gold line (rows) against each generated line (columns).
    pub pairwise_f1: Vec<Vec<f64>>,
}

impl ScoreDetail {
    /// Best generated match for each gold line.
    pub fn best_matches(&self) -> Vec<(usize, f64)> {
        self.pairwise_f1
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            })
            .collect()
    }
}

/// Scores generated lines (candidates) against gold lines (reference).
pub fn score_lines(
    gold: &[String],
    generated: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<ScoreDetail, MetricsError> {
    let mut reference_lines: Vec<String> = gold.iter().filter(|l| !l.trim().is_empty()).cloned().collect();
    let mut candidate_lines: Vec<String> = generated.iter().filter(|l| !l.trim().is_empty()).cloned().collect();
    if reference_lines.is_empty() || candidate_lines.is_empty() {
        return Err(MetricsError::EmptyTopicSet);
    }
    reference_lines.sort();
    candidate_lines.sort();
    let reference = provider.embed_tokens(&reference_lines.join("\n"))?;
    let candidate = provider.embed_tokens(&candidate_lines.join("\n"))?;
    let score = score_embeddings(&reference, &candidate)?;

    let embed_each = |lines: &[String]| -> Vec<Option<TokenEmbeddings>> {
        lines.iter().map(|l| provider.embed_tokens(l).ok()).collect()
    };
    let ref_each = embed_each(&reference_lines);
    let cand_each = embed_each(&candidate_lines);
    let pairwise_f1 = ref_each
        .iter()
        .map(|r| {
            cand_each
                .iter()
                .map(|c| match (r, c) {
                    (Some(r), Some(c)) => score_embeddings(r, c).map(|s| s.f1).unwrap_or(0.0),
                    _ => 0.0,
                })
                .collect()
        })
        .collect();

    Ok(ScoreDetail {
        model_id: provider.config().model_id.clone(),
        score,
        reference_lines,
        candidate_lines,
        pairwise_f1,
    })
}

pub fn score_topic_sets(
    generated: &TopicSet,
    gold: &GoldTopicSet,
    provider: &dyn EmbeddingProvider,
) -> Result<ScoreDetail, MetricsError> {
    score_pooled(std::slice::from_ref(generated), std::slice::from_ref(gold), provider)
}

/// Pools every generated topic against every gold topic.
pub fn score_pooled(
    generated: &[TopicSet],
    gold: &[GoldTopicSet],
    provider: &dyn EmbeddingProvider,
) -> Result<ScoreDetail, MetricsError> {
    let generated_lines: Vec<String> = generated.iter().flat_map(|s| s.topics.iter().map(topic_line)).collect();
    let gold_lines: Vec<String> = gold.iter().flat_map(|g| g.topics.iter().cloned()).collect();
    score_lines(&gold_lines, &generated_lines, provider)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub strategy: StrategyKind,
    pub model_id: String,
    pub score: PairScore,
}

/// Strategy rows by embedding-model blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub models: Vec<String>,
    pub strategies: Vec<StrategyKind>,
    /// Model-major, then strategies in table order.
    pub cells: Vec<ReportCell>,
}

/// Column rank of the three reference embedding models; others follow in
/// first-seen order.
fn model_rank(model_id: &str) -> usize {
    let m = model_id.to_ascii_lowercase();
    let m = m.rsplit('/').next().unwrap_or(&m);
    if m.starts_with("distilbert") || m.starts_with("distillbert") {
        0
    } else if m.starts_with("bert-base") {
        1
    } else if m.starts_with("roberta-large") {
        2
    } else {
        3
    }
}

pub fn build_report(runs: Vec<(StrategyKind, String, PairScore)>) -> Result<ScoreReport, MetricsError> {
    let mut first_seen: Vec<String> = Vec::new();
    let mut grid: BTreeMap<(String, StrategyKind), PairScore> = BTreeMap::new();
    for (strategy, model_id, score) in runs {
        if !first_seen.contains(&model_id) {
            first_seen.push(model_id.clone());
        }
        if grid.insert((model_id.clone(), strategy), score).is_some() {
            return Err(MetricsError::DuplicateCell { strategy, model_id });
        }
    }
    let mut models = first_seen.clone();
    models.sort_by_key(|m| (model_rank(m), first_seen.iter().position(|x| x == m)));
    let mut strategies: Vec<StrategyKind> = grid.keys().map(|(_, s)| *s).collect();
    strategies.sort_by_key(|s| s.table_rank());
    strategies.dedup();

    let mut cells = Vec::with_capacity(grid.len());
    for m in &models {
        for s in &strategies {
            if let Some(score) = grid.get(&(m.clone(), *s)) {
                cells.push(ReportCell {
                    strategy: *s,
                    model_id: m.clone(),
                    score: *score,
                });
            }
        }
    }
    Ok(ScoreReport {
        models,
        strategies,
        cells,
    })
}

impl ScoreReport {
    pub fn get(&self, strategy: StrategyKind, model_id: &str) -> Option<&PairScore> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.model_id == model_id)
            .map(|c| &c.score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Integer-percent CSV, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "strategy", "precision", "recall", "f1"])
            .expect("in-memory csv");
        for c in &self.cells {
            w.write_record([
                c.model_id.clone(),
                c.strategy.display_name().to_string(),
                percent(c.score.precision).to_string(),
                percent(c.score.recall).to_string(),
                percent(c.score.f1).to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Plain-text rendering with one block per model.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for m in &self.models {
            let _ = writeln!(out, "{m:<20} {:>9} {:>6} {:>8}", "Precision", "Recall", "F1-Score");
            for c in self.cells.iter().filter(|c| &c.model_id == m) {
                let _ = writeln!(
                    out,
                    "{:<20} {:>8}% {:>5}% {:>7}%",
                    c.strategy.display_name(),
                    percent(c.score.precision),
                    percent(c.score.recall),
                    percent(c.score.f1)
                );
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{DeterministicProvider, EmbeddingProviderConfig};
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> TokenEmbeddings {
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        TokenEmbeddings::from_rows("m", tokens, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    /// Cosine of every pair, best match per row, by explicit index loops.
    fn oracle_mean_best(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for f in from {
            let mut best = -2.0;
            for t in to {
                let c = cosine(f, t).unwrap();
                if c > best {
                    best = c;
                }
            }
            total += best;
        }
        total / from.len() as f64
    }

    fn rows_of(e: &TokenEmbeddings) -> Vec<Vec<f64>> {
        e.rows().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.6, 0.8], &[0.8, 0.6]).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricsError::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(MetricsError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn recall_and_precision_examples() {
        let two = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let one = mat(&[&[1.0, 0.0]]);
        assert_eq!(greedy_recall(&two, &one).unwrap(), 0.5);
        assert_eq!(greedy_precision(&two, &one).unwrap(), 1.0);
        let swapped = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(greedy_recall(&one, &swapped).unwrap(), 1.0);
        assert!((greedy_recall(&two, &two).unwrap() - 1.0).abs() < 1e-9);
        assert!((greedy_precision(&two, &two).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recall_errors() {
        let one = mat(&[&[1.0, 0.0]]);
        let mut other = mat(&[&[1.0, 0.0]]);
        other.model_id = "other".into();
        assert!(matches!(greedy_recall(&one, &other), Err(MetricsError::ModelMismatch(..))));
        let empty = TokenEmbeddings::from_rows("m", vec![], vec![]).unwrap();
        assert!(matches!(greedy_recall(&one, &empty), Err(MetricsError::EmptyTokenSet)));
        assert!(matches!(greedy_precision(&empty, &one), Err(MetricsError::EmptyTokenSet)));
    }

    #[test]
    fn f1_examples() {
        // Table values: (92, 91) shows F1 91 and (79, 80) shows 79.
        let rag_roberta = f1(0.92, 0.91);
        assert!((rag_roberta - 0.914_972_677_595_628).abs() < 1e-12);
        assert_eq!(percent(rag_roberta), 91);
        let rag_distil = f1(0.79, 0.80);
        assert!((rag_distil - 0.794_968_553_459_119_5).abs() < 1e-12);
        assert_eq!(percent(rag_distil), 79);
        assert!((f1(0.7, 0.7) - 0.7).abs() < 1e-15);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn percent_rounds_half_away_from_zero() {
        assert_eq!(percent(0.125), 13);
        assert_eq!(percent(-0.125), -13);
        assert_eq!(percent(0.124), 12);
    }

    fn provider() -> DeterministicProvider {
        DeterministicProvider::new(EmbeddingProviderConfig::deterministic("det", 32, 5)).unwrap()
    }

    fn topic_set(labels: &[&str]) -> TopicSet {
        TopicSet {
            strategy: StrategyKind::Rag,
            question_id: "q1".into(),
            topics: labels
                .iter()
                .map(|l| Topic {
                    label: l.to_string(),
                    description: String::new(),
                    anecdote: None,
                    strategy: StrategyKind::Rag,
                    question_id: "q1".into(),
                    grounding: Default::default(),
                    source: None,
                })
                .collect(),
            prompt_hash: String::new(),
        }
    }

    fn gold(labels: &[&str]) -> GoldTopicSet {
        GoldTopicSet {
            question_id: "q1".into(),
            topics: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn identical_topic_sets_score_one() {
        let labels = ["open textbooks", "student collaboration", "sharing slides"];
        let d = score_topic_sets(&topic_set(&labels), &gold(&labels), &provider()).unwrap();
        for v in [d.score.precision, d.score.recall, d.score.f1] {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn subset_generation_matches_brute_force() {
        let p = provider();
        let g = gold(&["open textbooks", "student collaboration"]);
        let d = score_topic_sets(&topic_set(&["student collaboration"]), &g, &p).unwrap();
        // Reference tokens: open, textbooks, student, collaboration; the last two
        // match exactly, so recall is (1 + 1 + best(open) + best(textbooks)) / 4.
        let vec = |t: &str| p.token_vector(t);
        let cand = [vec("student"), vec("collaboration")];
        let best = |t: &str| {
            cand.iter()
                .map(|c| cosine(&vec(t), c).unwrap())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let expected_recall = (best("open") + best("textbooks") + 2.0) / 4.0;
        assert!((d.score.recall - expected_recall).abs() < 1e-12);
        assert!((d.score.precision - 1.0).abs() < 1e-12);
        assert!(d.score.recall < 1.0);
        assert_eq!(d.pairwise_f1.len(), 2);
        assert_eq!(d.pairwise_f1[0].len(), 1);
        // "student collaboration" sorts after "open textbooks".
        assert!((d.pairwise_f1[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(d.best_matches()[1].0, 0);
    }

    #[test]
    fn empty_generated_set_is_an_error() {
        assert!(matches!(
            score_topic_sets(&topic_set(&[]), &gold(&["x"]), &provider()),
            Err(MetricsError::EmptyTopicSet)
        ));
    }

    #[test]
    fn serialization_is_order_insensitive() {
        let p = provider();
        let g = gold(&["open textbooks", "student collaboration"]);
        let a = score_topic_sets(&topic_set(&["sharing", "open access"]), &g, &p).unwrap();
        let b = score_topic_sets(&topic_set(&["open access", "sharing"]), &g, &p).unwrap();
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn report_shape_and_order() {
        let models = ["roberta-large", "Distillbert-base-uncased", "bert-base-uncased"];
        let mut runs = Vec::new();
        for m in models {
            for s in StrategyKind::ALL {
                runs.push((s, m.to_string(), PairScore::from_pr(0.5, 0.5)));
            }
        }
        let report = build_report(runs).unwrap();
        assert_eq!(report.cells.len(), 12);
        assert_eq!(report.models, ["Distillbert-base-uncased", "bert-base-uncased", "roberta-large"]);
        assert_eq!(report.strategies, StrategyKind::TABLE_ORDER);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 13);
        assert_eq!(lines[1], "Distillbert-base-uncased,Chain of Thought,50,50,50");
        assert_eq!(lines[4], "Distillbert-base-uncased,RAG,50,50,50");
    }

    #[test]
    fn report_single_and_duplicate_cells() {
        let single = build_report(vec![(StrategyKind::Rag, "m".into(), PairScore::from_pr(0.9, 0.8))]).unwrap();
        assert_eq!(single.cells.len(), 1);
        assert_eq!((single.models.len(), single.strategies.len()), (1, 1));
        let dup = build_report(vec![
            (StrategyKind::Rag, "m".into(), PairScore::from_pr(0.9, 0.8)),
            (StrategyKind::Rag, "m".into(), PairScore::from_pr(0.1, 0.2)),
        ]);
        assert!(matches!(dup, Err(MetricsError::DuplicateCell { .. })));
    }

    #[test]
    fn report_json_keeps_raw_values() {
        let report = build_report(vec![(StrategyKind::FewShot, "m".into(), PairScore::from_pr(0.723, 0.671))]).unwrap();
        let back: ScoreReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.render_table().contains("Few Shot"));
    }

    fn matrix(max_rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(
            proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |r| r.iter().any(|x| x.abs() > 1e-3)),
            1..=max_rows,
        )
    }

    fn embed(rows: &[Vec<f64>]) -> TokenEmbeddings {
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        TokenEmbeddings::from_rows("m", tokens, rows.to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn matches_double_loop_oracle((a, b) in (2usize..=8).prop_flat_map(|d| (matrix(6, d), matrix(6, d)))) {
            let (ea, eb) = (embed(&a), embed(&b));
            let r = greedy_recall(&ea, &eb).unwrap();
            let p = greedy_precision(&ea, &eb).unwrap();
            prop_assert!((r - oracle_mean_best(&rows_of(&ea), &rows_of(&eb))).abs() <= 1e-12);
            prop_assert!((p - oracle_mean_best(&rows_of(&eb), &rows_of(&ea))).abs() <= 1e-12);
            prop_assert_eq!(p, greedy_recall(&eb, &ea).unwrap());
        }

        #[test]
        fn row_permutation_invariance((a, b) in (2usize..=8).prop_flat_map(|d| (matrix(6, d), matrix(6, d))), rot in 0usize..6) {
            let mut a2 = a.clone();
            let k = rot % a2.len();
            a2.rotate_left(k);
            let mut b2 = b.clone();
            b2.reverse();
            let base = score_embeddings(&embed(&a), &embed(&b)).unwrap();
            let perm = score_embeddings(&embed(&a2), &embed(&b2)).unwrap();
            prop_assert!((base.recall - perm.recall).abs() <= 1e-12);
            prop_assert!((base.precision - perm.precision).abs() <= 1e-12);
        }

        #[test]
        fn appending_candidates_never_lowers_recall((a, b, extra) in (2usize..=8).prop_flat_map(|d| (matrix(6, d), matrix(5, d), matrix(1, d)))) {
            let before = greedy_recall(&embed(&a), &embed(&b)).unwrap();
            let mut grown = b.clone();
            grown.extend(extra);
            let after = greedy_recall(&embed(&a), &embed(&grown)).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn f1_lies_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = f1(p, r);
            prop_assert!(f >= p.min(r) - 1e-15 && f <= p.max(r) + 1e-15);
            if (p - r).abs() > 1e-9 {
                prop_assert!(f > p.min(r) && f < p.max(r));
            }
        }
    }
}
