//! Chat-completions HTTP backend.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{response_json_schema, Backend, CompletionRequest, GatewayError};

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "METACAL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL up to (not including) `/chat/completions`, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Transport retries after the first attempt.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff")]
    pub max_backoff_ms: u64,
    /// Audit log of request/response bodies (JSONL).
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    4
}
fn default_initial_backoff() -> u64 {
    500
}
fn default_max_backoff() -> u64 {
    16_000
}

impl RemoteConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        RemoteConfig {
            base_url: base_url.to_string(),
            model: model.to_string(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            initial_backoff_ms: default_initial_backoff(),
            max_backoff_ms: default_max_backoff(),
            log_path: None,
        }
    }

    /// Delay before retry number `retry` (0-based): doubling, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << retry.min(32))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: &str) -> Self {
        ChatMessage {
            role: role.to_string(),
            content: content.to_string(),
        }
    }
}

/// Low-level structured chat call, shared by answer generation and the judge oracle.
pub trait ChatTransport: Send + Sync {
    fn chat(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        schema_name: &str,
        schema: &serde_json::Value,
    ) -> Result<String, GatewayError>;
}

pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: String,
    log: Option<Mutex<BufWriter<File>>>,
}

impl RemoteBackend {
    /// Reads the credential from the configured environment variable.
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::MissingCredential(config.api_key_env.clone()))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: RemoteConfig, api_key: String) -> Result<Self, GatewayError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let log = match &config.log_path {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| GatewayError::Cache(format!("{}: {e}", p.display())))?;
                Some(Mutex::new(BufWriter::new(f)))
            }
            None => None,
        };
        Ok(RemoteBackend {
            id: format!("remote:{}", config.model),
            config,
            agent,
            api_key,
            log,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn redact(&self, text: &str) -> String {
        text.replace(&self.api_key, "***")
    }

    fn audit(&self, attempt: u32, body: &str, status: Option<u16>, response: &str) {
        let Some(log) = &self.log else { return };
        let entry = json!({
            "url": self.endpoint(),
            "attempt": attempt,
            "headers": {"authorization": "Bearer ***"},
            "request": serde_json::from_str::<serde_json::Value>(body).unwrap_or_else(|_| body.into()),
            "status": status,
            "response": self.redact(response),
        });
        if let Ok(mut w) = log.lock() {
            let _ = writeln!(w, "{entry}").and_then(|_| w.flush());
        }
    }

    fn post_once(&self, body: &str) -> Result<(u16, String), String> {
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .content_type("application/json")
            .send(body)
            .map_err(|e| self.redact(&e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.redact(&e.to_string()))?;
        Ok((status, text))
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl ChatTransport for RemoteBackend {
    fn chat(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        schema_name: &str,
        schema: &serde_json::Value,
    ) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": schema_name, "strict": true, "schema": schema}
            }
        })
        .to_string();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff(attempt - 1));
            }
            match self.post_once(&body) {
                Ok((status, text)) => {
                    self.audit(attempt, &body, Some(status), &text);
                    if (200..300).contains(&status) {
                        let value: serde_json::Value = match serde_json::from_str(&text) {
                            Ok(v) => v,
                            // malformed envelope: hand the text to the schema check
                            Err(_) => return Ok(text),
                        };
                        return Ok(value["choices"][0]["message"]["content"]
                            .as_str()
                            .unwrap_or_default()
                            .to_string());
                    }
                    last = format!("HTTP {status}: {}", self.redact(&text));
                    if !retryable(status) {
                        return Err(GatewayError::Transport {
                            attempts: attempt + 1,
                            message: last,
                        });
                    }
                }
                Err(e) => {
                    self.audit(attempt, &body, None, &e);
                    last = e;
                }
            }
            log::warn!("request to {} failed (attempt {}): {last}", self.endpoint(), attempt + 1);
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, req: &CompletionRequest, _attempt: u32) -> Result<String, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &req.prompt.system_text {
            messages.push(ChatMessage::new("system", system));
        }
        messages.push(ChatMessage::new("user", &req.prompt.user_text));
        let schema = response_json_schema(&req.prompt);
        self.chat(&messages, req.temperature, &req.schema_id.to_string(), &schema)
    }
}
