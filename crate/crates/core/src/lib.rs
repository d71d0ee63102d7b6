//! Deductive thematic analysis of interview transcripts with LLM prompting
//! strategies, greedy token-matching evaluation against gold topics, an LDA
//! baseline, and an append-only audit trail that makes every run replayable.

pub mod corpus;
pub mod embedding;
pub mod lda;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod rng;
pub mod workbench;

/// Lowercase hex SHA-256 digest of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
