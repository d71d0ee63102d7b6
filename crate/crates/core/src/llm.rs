//! Completion interface over generative-model backends.
//!
//! [`LlmClient::complete`] is the single entry point: it validates the request,
//! retries a transient backend failure once, and writes exactly one `llm-call`
//! audit record per invocation whatever the outcome.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::sha256_hex;
use crate::workbench::audit::{AuditError, AuditKind, AuditLog};

pub const DEFAULT_MODEL_ID: &str = "claude-2";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;
pub const ANTHROPIC_API_URL: &str = "https://api.anthropic.com";
pub const ANTHROPIC_KEY_ENV: &str = "ANTHROPIC_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no remaining scripted response matches the prompt")]
    ScriptExhausted,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script {path}: {reason}")]
    Script { path: String, reason: String },
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

/// Why a single backend attempt failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    /// Worth one retry: connection problems, rate limits, server errors.
    Transient(String),
    Permanent(String),
    ScriptExhausted,
}

/// How a backend identifies itself in manifests and audit records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    /// `scripted` or `anthropic`.
    pub kind: String,
    pub name: String,
    /// Content digest for scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl BackendIdentity {
    pub fn is_scripted(&self) -> bool {
        self.kind == "scripted"
    }
}

pub trait LlmBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn generate(&self, req: &LlmRequest) -> Result<String, BackendFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub response: String,
}

/// Replays a fixed list of responses. Each prompt consumes the first unused
/// entry, in file order, whose pattern is absent or occurs in the prompt.
pub struct ScriptedBackend {
    name: String,
    digest: String,
    entries: Mutex<Vec<(ScriptedResponse, bool)>>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, script: Vec<ScriptedResponse>) -> Self {
        let digest = sha256_hex(serde_json::to_vec(&script).expect("script serializes"));
        Self {
            name: name.into(),
            digest,
            entries: Mutex::new(script.into_iter().map(|e| (e, false)).collect()),
        }
    }

    pub fn from_json(name: impl Into<String>, json: &str) -> Result<Self, LlmError> {
        let name = name.into();
        let script: Vec<ScriptedResponse> = serde_json::from_str(json).map_err(|e| LlmError::Script {
            path: name.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self::new(name, script))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path).map_err(|e| LlmError::Script {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(path.display().to_string(), &raw)
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("script lock").iter().filter(|(_, used)| !used).count()
    }
}

impl LlmBackend for ScriptedBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            kind: "scripted".into(),
            name: self.name.clone(),
            digest: Some(self.digest.clone()),
        }
    }

    fn generate(&self, req: &LlmRequest) -> Result<String, BackendFailure> {
        let mut entries = self.entries.lock().expect("script lock");
        let next = entries.iter_mut().find(|(entry, used)| {
            !*used && entry.pattern.as_deref().is_none_or(|p| req.prompt.contains(p))
        });
        match next {
            Some((entry, used)) => {
                *used = true;
                Ok(entry.response.clone())
            }
            None => Err(BackendFailure::ScriptExhausted),
        }
    }
}

/// Anthropic Messages API backend. The key is read from the environment and
/// never written to manifests or audit records.
pub struct AnthropicBackend {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct MessagesResponse {
    content: Vec<ContentBlock>,
}

#[derive(Deserialize)]
struct ContentBlock {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    text: String,
}

impl AnthropicBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .new_agent();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent,
        }
    }

    /// Reads the key from `key_env`.
    pub fn from_env(base_url: Option<&str>, key_env: &str) -> Result<Self, LlmError> {
        let key = std::env::var(key_env)
            .map_err(|_| LlmError::BackendUnavailable(format!("environment variable {key_env} is not set")))?;
        Ok(Self::new(base_url.unwrap_or(ANTHROPIC_API_URL), key))
    }
}

impl LlmBackend for AnthropicBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            kind: "anthropic".into(),
            name: self.base_url.clone(),
            digest: None,
        }
    }

    fn generate(&self, req: &LlmRequest) -> Result<String, BackendFailure> {
        let body = json!({
            "model": req.model_id,
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": req.prompt}],
        });
        let result = self
            .agent
            .post(format!("{}/v1/messages", self.base_url))
            .header("x-api-key", &self.api_key)
            .header("anthropic-version", "2023-06-01")
            .send_json(&body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                return Err(BackendFailure::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => return Err(BackendFailure::Permanent(format!("HTTP {code}"))),
            Err(e) => return Err(BackendFailure::Transient(e.to_string())),
        };
        let parsed: MessagesResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendFailure::Permanent(format!("malformed response: {e}")))?;
        Ok(parsed
            .content
            .into_iter()
            .filter(|b| b.kind == "text")
            .map(|b| b.text)
            .collect::<Vec<_>>()
            .join(""))
    }
}

/// Audited front end to a backend.
pub struct LlmClient<'a> {
    backend: &'a dyn LlmBackend,
    audit: &'a AuditLog,
    calls: AtomicUsize,
}

impl<'a> LlmClient<'a> {
    pub fn new(backend: &'a dyn LlmBackend, audit: &'a AuditLog) -> Self {
        Self {
            backend,
            audit,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `complete` calls issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn identity(&self) -> BackendIdentity {
        self.backend.identity()
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let invalid = if req.prompt.trim().is_empty() {
            Some("empty prompt")
        } else if req.temperature.is_nan() || req.temperature < 0.0 {
            Some("temperature must be non-negative")
        } else {
            None
        };
        let prompt_hash = self.audit.store_prompt(&req.prompt)?;
        let identity = self.backend.identity();

        let mut attempts = 0;
        let outcome = match invalid {
            Some(reason) => Err(LlmError::InvalidRequest(reason.into())),
            None => loop {
                attempts += 1;
                match self.backend.generate(req) {
                    Ok(text) => break Ok(text),
                    Err(BackendFailure::Transient(_)) if attempts < 2 => continue,
                    Err(BackendFailure::Transient(msg)) | Err(BackendFailure::Permanent(msg)) => {
                        break Err(LlmError::BackendUnavailable(msg))
                    }
                    Err(BackendFailure::ScriptExhausted) => break Err(LlmError::ScriptExhausted),
                }
            },
        };

        let mut payload = json!({
            "prompt_hash": prompt_hash,
            "model_id": req.model_id,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
            "backend": identity,
            "attempts": attempts,
            "retried": attempts > 1,
        });
        match &outcome {
            Ok(text) => {
                payload["status"] = json!("ok");
                payload["response_hash"] = json!(sha256_hex(text));
                payload["response"] = json!(text);
            }
            Err(e) => {
                payload["status"] = json!("error");
                payload["error"] = json!(e.to_string());
            }
        }
        self.audit.record(AuditKind::LlmCall, payload)?;
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write as _};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn request(prompt: &str) -> LlmRequest {
        LlmRequest {
            prompt: prompt.into(),
            model_id: DEFAULT_MODEL_ID.into(),
            temperature: 0.0,
            max_output_tokens: 256,
        }
    }

    #[test]
    fn scripted_response_is_returned_verbatim() {
        let audit = AuditLog::in_memory("r");
        let backend = ScriptedBackend::new(
            "s",
            vec![ScriptedResponse {
                pattern: None,
                response: "TOPIC: X\nANECDOTE: \"y\"".into(),
            }],
        );
        let client = LlmClient::new(&backend, &audit);
        assert_eq!(client.complete(&request("p")).unwrap(), "TOPIC: X\nANECDOTE: \"y\"");
        assert_eq!(audit.count(AuditKind::LlmCall), 1);
        let rec = &audit.records()[0];
        assert_eq!(rec.payload["prompt_hash"], sha256_hex("p"));
        assert_eq!(rec.payload["model_id"], DEFAULT_MODEL_ID);
        assert_eq!(audit.prompt(&sha256_hex("p")).as_deref(), Some("p"));
    }

    #[test]
    fn empty_script_is_exhausted_and_audited() {
        let audit = AuditLog::in_memory("r");
        let backend = ScriptedBackend::new("s", vec![]);
        let client = LlmClient::new(&backend, &audit);
        assert!(matches!(client.complete(&request("p")), Err(LlmError::ScriptExhausted)));
        assert_eq!(audit.count(AuditKind::LlmCall), 1);
        assert_eq!(audit.records()[0].payload["status"], "error");
    }

    #[test]
    fn gated_entries_wait_for_their_pattern() {
        let backend = ScriptedBackend::from_json(
            "s",
            r#"[{"match":"collaboration","response":"gated"},{"response":"open"}]"#,
        )
        .unwrap();
        let audit = AuditLog::in_memory("r");
        let client = LlmClient::new(&backend, &audit);
        assert_eq!(client.complete(&request("about sharing")).unwrap(), "open");
        assert_eq!(backend.remaining(), 1);
        assert!(matches!(client.complete(&request("about sharing")), Err(LlmError::ScriptExhausted)));
        assert_eq!(client.complete(&request("about collaboration")).unwrap(), "gated");
        assert_eq!(backend.remaining(), 0);
    }

    struct Flaky {
        calls: AtomicUsize,
        failures: usize,
    }

    impl LlmBackend for Flaky {
        fn identity(&self) -> BackendIdentity {
            BackendIdentity {
                kind: "test".into(),
                name: "flaky".into(),
                digest: None,
            }
        }

        fn generate(&self, _req: &LlmRequest) -> Result<String, BackendFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendFailure::Transient("reset".into()))
            } else {
                Ok("fine".into())
            }
        }
    }

    #[test]
    fn one_transient_failure_is_retried() {
        let audit = AuditLog::in_memory("r");
        let backend = Flaky {
            calls: AtomicUsize::new(0),
            failures: 1,
        };
        let client = LlmClient::new(&backend, &audit);
        assert_eq!(client.complete(&request("p")).unwrap(), "fine");
        let rec = &audit.records()[0];
        assert_eq!(rec.payload["attempts"], 2);
        assert_eq!(rec.payload["retried"], true);
        assert_eq!(audit.count(AuditKind::LlmCall), 1);
    }

    #[test]
    fn second_transient_failure_is_unavailable() {
        let audit = AuditLog::in_memory("r");
        let backend = Flaky {
            calls: AtomicUsize::new(0),
            failures: 2,
        };
        let client = LlmClient::new(&backend, &audit);
        assert!(matches!(client.complete(&request("p")), Err(LlmError::BackendUnavailable(_))));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn invalid_requests_are_rejected_but_still_audited() {
        let audit = AuditLog::in_memory("r");
        let backend = ScriptedBackend::new("s", vec![]);
        let client = LlmClient::new(&backend, &audit);
        assert!(matches!(client.complete(&request("  ")), Err(LlmError::InvalidRequest(_))));
        let mut neg = request("p");
        neg.temperature = -1.0;
        assert!(matches!(client.complete(&neg), Err(LlmError::InvalidRequest(_))));
        assert_eq!(audit.count(AuditKind::LlmCall), 2);
    }

    #[test]
    fn unreachable_anthropic_endpoint_is_unavailable() {
        let audit = AuditLog::in_memory("r");
        let backend = AnthropicBackend::new("http://127.0.0.1:1", "test-key");
        let client = LlmClient::new(&backend, &audit);
        assert!(matches!(client.complete(&request("p")), Err(LlmError::BackendUnavailable(_))));
        assert_eq!(audit.records()[0].payload["attempts"], 2);
    }

    #[test]
    fn anthropic_backend_reads_text_blocks() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 8192];
            let n = stream.read(&mut buf).unwrap();
            let request = String::from_utf8_lossy(&buf[..n]).to_string();
            let body = r#"{"content":[{"type":"text","text":"TOPIC: Openness"}]}"#;
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            request
        });
        let audit = AuditLog::in_memory("r");
        let backend = AnthropicBackend::new(format!("http://{addr}"), "secret-key");
        let client = LlmClient::new(&backend, &audit);
        assert_eq!(client.complete(&request("p")).unwrap(), "TOPIC: Openness");
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /v1/messages"));
        assert!(seen.to_ascii_lowercase().contains("x-api-key: secret-key"));
        let audit_text = serde_json::to_string(&audit.records()).unwrap();
        assert!(!audit_text.contains("secret-key"));
    }
}
