use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::AgentRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub text: bool,
    pub vision: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPart {
    Text(String),
    Image { mime: String, bytes: Vec<u8> },
}

impl PromptPart {
    pub fn png(bytes: Vec<u8>) -> Self {
        PromptPart::Image {
            mime: "image/png".into(),
            bytes,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            PromptPart::Text(t) => Some(t),
            PromptPart::Image { .. } => None,
        }
    }

    /// Log form: text verbatim, images by content hash.
    pub fn log_value(&self) -> serde_json::Value {
        match self {
            PromptPart::Text(t) => json!({ "type": "text", "text": t }),
            PromptPart::Image { mime, bytes } => json!({
                "type": "image",
                "mime": mime,
                "sha256": hex::encode(Sha256::digest(bytes)),
                "len": bytes.len(),
            }),
        }
    }
}

/// One agent call: which role is asking, for which iteration, and the
/// ordered prompt parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub role: AgentRole,
    pub iteration: u32,
    pub parts: Vec<PromptPart>,
}

impl LlmRequest {
    pub fn text(&self) -> String {
        self.parts.iter().filter_map(PromptPart::as_text).collect::<Vec<_>>().join("\n")
    }

    pub fn has_image(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, PromptPart::Image { .. }))
    }

    pub fn log_value(&self) -> serde_json::Value {
        json!({
            "role": self.role,
            "iteration": self.iteration,
            "parts": self.parts.iter().map(PromptPart::log_value).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend `{backend}` cannot handle this request: {reason}")]
    Unsupported { backend: String, reason: String },
    #[error("script: {0}")]
    Script(String),
}

/// A text (and optionally vision) completion model.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn call(&self, request: &LlmRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: AgentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    pub completion: String,
}

impl ScriptEntry {
    pub fn new(role: AgentRole, completion: impl Into<String>) -> Self {
        Self {
            role,
            iteration: None,
            completion: completion.into(),
        }
    }

    pub fn at(mut self, iteration: u32) -> Self {
        self.iteration = Some(iteration);
        self
    }

    fn matches(&self, request: &LlmRequest) -> bool {
        self.role == request.role && self.iteration.is_none_or(|i| i == request.iteration)
    }
}

/// Canned completions, consumed strictly in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TranscriptScript {
    pub entries: Vec<ScriptEntry>,
}

impl TranscriptScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Replays a [`TranscriptScript`]. Requests that do not match the next entry
/// go to the fallback backend if one is set, and are an error otherwise.
/// Every request is captured for inspection.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ScriptEntry>>,
    captured: Mutex<Vec<LlmRequest>>,
    fallback: Option<Arc<dyn LlmBackend>>,
}

impl ScriptedBackend {
    pub fn new(script: TranscriptScript) -> Self {
        Self {
            queue: Mutex::new(script.entries.into()),
            captured: Mutex::new(Vec::new()),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn LlmBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn captured(&self) -> Vec<LlmRequest> {
        self.captured.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { text: true, vision: true }
    }

    fn call(&self, request: &LlmRequest) -> Result<String, BackendError> {
        self.captured
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        let next = {
            let mut queue = self.queue.lock().unwrap_or_else(|e| e.into_inner());
            match queue.front() {
                Some(entry) if entry.matches(request) => queue.pop_front(),
                _ => None,
            }
        };
        if let Some(entry) = next {
            return Ok(entry.completion);
        }
        match &self.fallback {
            Some(fallback) => fallback.call(request),
            None => {
                let expected = self
                    .queue
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .front()
                    .map(|e| format!("{} (iteration {:?})", e.role, e.iteration))
                    .unwrap_or_else(|| "end of script".into());
                Err(BackendError::Script(format!(
                    "no entry for {} iteration {}; next is {expected}",
                    request.role, request.iteration
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(role: AgentRole, iteration: u32) -> LlmRequest {
        LlmRequest {
            role,
            iteration,
            parts: vec![PromptPart::Text("hi".into())],
        }
    }

    #[test]
    fn script_json_shape() {
        let s = TranscriptScript::from_json(
            r##"[{"role":"generator","completion":"a"},{"role":"evaluator","iteration":1,"completion":"SCORE: 95"}]"##,
        )
        .unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(s.entries[1].iteration, Some(1));
        let back = serde_json::to_string(&s).unwrap();
        assert_eq!(TranscriptScript::from_json(&back).unwrap(), s);
    }

    #[test]
    fn scripted_backend_consumes_in_order() {
        let b = ScriptedBackend::new(TranscriptScript::new(vec![
            ScriptEntry::new(AgentRole::Generator, "one"),
            ScriptEntry::new(AgentRole::Evaluator, "two").at(1),
        ]));
        assert!(b.call(&req(AgentRole::Evaluator, 1)).is_err());
        assert_eq!(b.call(&req(AgentRole::Generator, 1)).unwrap(), "one");
        assert!(b.call(&req(AgentRole::Evaluator, 2)).is_err());
        assert_eq!(b.call(&req(AgentRole::Evaluator, 1)).unwrap(), "two");
        assert_eq!(b.remaining(), 0);
        assert_eq!(b.captured().len(), 4);
    }

    #[test]
    fn images_are_logged_by_hash() {
        let part = PromptPart::png(vec![1, 2, 3]);
        let v = part.log_value();
        assert_eq!(v["len"], 3);
        assert_eq!(v["sha256"].as_str().unwrap().len(), 64);
        assert!(v.get("bytes").is_none());
    }
}
