use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Capabilities, LlmBackend, LlmRequest, PromptPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatBackendConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_vision")]
    pub vision: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Extra attempts after a transport error or 5xx response.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_vision() -> bool {
    true
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

/// OpenAI-style `POST {base_url}/chat/completions` client. Prompt parts are
/// sent in order as one user message; images become base64 data URLs.
pub struct ChatBackend {
    config: ChatBackendConfig,
    name: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for ChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl ChatBackend {
    pub fn new(config: ChatBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            name: format!("chat/{}", config.model),
            config,
            client,
        })
    }

    pub fn request_body(&self, request: &LlmRequest) -> Value {
        let content: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                PromptPart::Text(t) => json!({ "type": "text", "text": t }),
                PromptPart::Image { mime, bytes } => json!({
                    "type": "image_url",
                    "image_url": {
                        "url": format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
                    }
                }),
            })
            .collect();
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": content }],
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) | BackendError::Timeout => true,
        BackendError::Status { status, .. } => *status >= 500 || *status == 429,
        _ => false,
    }
}

impl LlmBackend for ChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            vision: self.config.vision,
        }
    }

    fn call(&self, request: &LlmRequest) -> Result<String, BackendError> {
        if request.has_image() && !self.config.vision {
            return Err(BackendError::Unsupported {
                backend: self.name.clone(),
                reason: "request has image parts but vision is disabled".into(),
            });
        }
        let body = self.request_body(request);
        let mut tries = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if retryable(&e) && tries < self.config.retries => {
                    tries += 1;
                    tracing::warn!(error = %e, attempt = tries, "retrying backend call");
                    std::thread::sleep(Duration::from_millis(200 * u64::from(tries)));
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentRole;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves `responses` in order, one per connection, and reports each
    /// request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.to_ascii_lowercase().starts_with("content-length:") {
                        len = line[15..].trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((head, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn config(base_url: String) -> ChatBackendConfig {
        ChatBackendConfig {
            base_url,
            model: "test-model".into(),
            api_key: Some("sk-test".into()),
            vision: true,
            timeout_secs: 5,
            retries: 1,
        }
    }

    fn request() -> LlmRequest {
        LlmRequest {
            role: AgentRole::Evaluator,
            iteration: 1,
            parts: vec![PromptPart::Text("rate it".into()), PromptPart::png(vec![137, 80, 78, 71])],
        }
    }

    #[test]
    fn sends_ordered_parts_and_reads_content() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"SCORE: 91"}}]}"#.to_string();
        let (url, rx) = serve(vec![(200, ok)]);
        let backend = ChatBackend::new(config(url)).unwrap();
        assert_eq!(backend.call(&request()).unwrap(), "SCORE: 91");
        let (head, body) = rx.recv().unwrap();
        assert!(head.starts_with("POST /v1/chat/completions"));
        assert!(head.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "test-model");
        let content = v["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content[0]["text"], "rate it");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
    }

    #[test]
    fn retries_server_errors_then_gives_up() {
        let (url, _rx) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
        let backend = ChatBackend::new(config(url)).unwrap();
        assert!(matches!(backend.call(&request()), Err(BackendError::Status { status: 503, .. })));
    }

    #[test]
    fn vision_disabled_rejects_images() {
        let mut cfg = config("http://127.0.0.1:9".into());
        cfg.vision = false;
        let backend = ChatBackend::new(cfg).unwrap();
        assert!(matches!(backend.call(&request()), Err(BackendError::Unsupported { .. })));
    }

    #[test]
    fn api_key_is_never_serialized() {
        let json = serde_json::to_string(&config("http://x".into())).unwrap();
        assert!(!json.contains("sk-test"));
    }
}
