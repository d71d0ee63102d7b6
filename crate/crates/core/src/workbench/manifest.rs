//! Run manifests: everything needed to re-execute a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProviderConfig;
use crate::llm::BackendIdentity;
use crate::pipeline::{RunConfig, Templates};
use crate::sha256_hex;

use super::config::LlmConfig;
use super::WorkbenchError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRole {
    Transcript,
    Questions,
    Template,
    Script,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: InputRole,
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: InputRole, path: &Path) -> Result<Self, WorkbenchError> {
        Ok(Self {
            role,
            path: std::path::absolute(path).map_err(|e| WorkbenchError::io(path, e))?,
            sha256: file_digest(path)?,
        })
    }

    pub fn verify(&self) -> Result<(), WorkbenchError> {
        let actual = file_digest(&self.path)?;
        if actual != self.sha256 {
            return Err(WorkbenchError::DigestMismatch {
                path: self.path.clone(),
                expected: self.sha256.clone(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String, WorkbenchError> {
    let bytes = std::fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSpec {
    pub models: Vec<EmbeddingProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub embedding: u64,
    pub evaluation: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub templates: Templates,
    pub llm: LlmConfig,
    pub backend: BackendIdentity,
    pub inputs: Vec<InputDigest>,
    pub seeds: Seeds,
    /// Digest of the serialized knowledge-base index used by rag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationSpec>,
}

impl RunManifest {
    pub fn inputs_of(&self, role: InputRole) -> impl Iterator<Item = &InputDigest> {
        self.inputs.iter().filter(move |i| i.role == role)
    }

    pub fn verify_inputs(&self) -> Result<(), WorkbenchError> {
        self.inputs.iter().try_for_each(InputDigest::verify)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkbenchError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| WorkbenchError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| WorkbenchError::json(path, e))
    }
}
