//! Uniform access to answer-producing backends.
//!
//! A [`Backend`] turns a [`CompletionRequest`] into raw completion text. The
//! [`Gateway`] wraps a backend with structured-output validation (bounded
//! re-asks), a response cache keyed by `(backend, prompt digest, temperature,
//! sample index)`, and order-preserving batch execution.

mod cache;
mod prompt;
mod remote;
mod simulated;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, ResponseCache};
pub use prompt::{
    render_comparison, render_prompt, render_single, PromptInstance, Task, COMPARISON_HEADER,
    COMPARISON_QUESTION, SINGLE_SYSTEM_PROMPT,
};
pub use remote::{ChatMessage, ChatTransport, RemoteBackend, RemoteConfig, API_KEY_ENV};
pub use simulated::{
    distractor, simulate_answer, simulate_greedy_answer, ComparisonPolicy, SimulatedBackend,
    SimulatedModelProfile, VerbalizationPolicy,
};

use crate::exec::Execution;

/// Re-asks after the first schema violation.
pub const DEFAULT_MAX_REASKS: u32 = 2;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("response violates the {schema} schema after {attempts} attempt(s): {reason}")]
    Parse {
        schema: SchemaId,
        attempts: u32,
        reason: String,
        raw_text: String,
    },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("invalid simulated profile: {0}")]
    Profile(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl GatewayError {
    /// True for failures that indicate malformed output rather than an unreachable backend.
    pub fn is_parse(&self) -> bool {
        matches!(self, GatewayError::Parse { .. })
    }
}

/// Which response shape a completion must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    SingleQuestion,
    Comparison,
}

impl std::fmt::Display for SchemaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchemaId::SingleQuestion => "single_question",
            SchemaId::Comparison => "comparison",
        })
    }
}

impl SchemaId {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::SingleQuestion => SchemaId::SingleQuestion,
            Task::Comparison => SchemaId::Comparison,
        }
    }
}

/// The model's pick in a comparison prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    Q1,
    Q2,
}

impl Choice {
    pub fn as_str(&self) -> &'static str {
        match self {
            Choice::Q1 => "Q1",
            Choice::Q2 => "Q2",
        }
    }

    pub fn other(&self) -> Choice {
        match self {
            Choice::Q1 => Choice::Q2,
            Choice::Q2 => Choice::Q1,
        }
    }
}

impl std::fmt::Display for Choice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: PromptInstance,
    pub temperature: f64,
    pub sample_index: u32,
    pub schema_id: SchemaId,
    pub backend_id: String,
}

impl CompletionRequest {
    pub fn new(prompt: PromptInstance, temperature: f64, sample_index: u32, backend_id: &str) -> Self {
        CompletionRequest {
            schema_id: SchemaId::for_task(prompt.task),
            prompt,
            temperature,
            sample_index,
            backend_id: backend_id.to_string(),
        }
    }

    fn check(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Prompt(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.schema_id != SchemaId::for_task(self.prompt.task) {
            return Err(GatewayError::Prompt(format!(
                "schema {} does not match task {:?}",
                self.schema_id, self.prompt.task
            )));
        }
        self.prompt.check()
    }
}

/// A validated completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    /// One answer per question in the prompt, as returned (not yet normalized).
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<Choice>,
    pub raw_text: String,
}

/// Validate raw completion text against a response schema.
///
/// Accepts a bare JSON object, optionally wrapped in a markdown code fence.
pub fn parse_response(raw: &str, schema: SchemaId) -> Result<ParsedResponse, String> {
    let body = strip_fence(raw);
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("not JSON: {e}"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    match schema {
        SchemaId::SingleQuestion => {
            let answer = answer_field(obj, "answer")?;
            let confidence = obj
                .get("confidence")
                .ok_or("missing `confidence`")?
                .as_f64()
                .ok_or("`confidence` is not a number")?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(format!("confidence {confidence} outside [0, 1]"));
            }
            Ok(ParsedResponse {
                answers: vec![answer],
                confidence: Some(confidence),
                choice: None,
                raw_text: raw.to_string(),
            })
        }
        SchemaId::Comparison => {
            let choice = match obj.get("choice").and_then(|v| v.as_str()).map(str::trim) {
                Some(c) if c.eq_ignore_ascii_case("q1") => Choice::Q1,
                Some(c) if c.eq_ignore_ascii_case("q2") => Choice::Q2,
                Some(c) => return Err(format!("`choice` must be Q1 or Q2, got `{c}`")),
                None => return Err("missing string `choice`".into()),
            };
            let a1 = answer_field(obj, "answer_q1")?;
            let a2 = answer_field(obj, "answer_q2")?;
            Ok(ParsedResponse {
                answers: vec![a1, a2],
                confidence: None,
                choice: Some(choice),
                raw_text: raw.to_string(),
            })
        }
    }
}

fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        if let Some(inner) = rest.trim_end().strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

fn answer_field(obj: &serde_json::Map<String, serde_json::Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Number(n)) if n.is_i64() || n.is_u64() => Ok(n.to_string()),
        Some(other) => Err(format!("`{key}` must be a string or integer, got {other}")),
        None => Err(format!("missing `{key}`")),
    }
}

/// JSON schema sent to remote backends for structured output.
pub fn response_json_schema(prompt: &PromptInstance) -> serde_json::Value {
    use crate::corpus::AnswerFormat;
    use serde_json::json;
    let answer = |format: AnswerFormat| match format {
        AnswerFormat::MultipleChoice => json!({"type": "string", "pattern": "^[A-Z]$"}),
        AnswerFormat::Numeric => json!({"type": "integer"}),
        AnswerFormat::ShortAnswer => json!({"type": "string"}),
    };
    match prompt.task {
        Task::SingleQuestion => json!({
            "type": "object",
            "properties": {
                "answer": answer(prompt.answer_formats[0]),
                "confidence": {"type": "number"}
            },
            "required": ["answer", "confidence"],
            "additionalProperties": false
        }),
        Task::Comparison => json!({
            "type": "object",
            "properties": {
                "choice": {"type": "string", "enum": ["Q1", "Q2"]},
                "answer_q1": answer(prompt.answer_formats[0]),
                "answer_q2": answer(prompt.answer_formats[1])
            },
            "required": ["choice", "answer_q1", "answer_q2"],
            "additionalProperties": false
        }),
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Produce raw completion text. `attempt` counts re-asks after schema violations.
    fn complete_raw(&self, request: &CompletionRequest, attempt: u32) -> Result<String, GatewayError>;
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    max_reasks: u32,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: Arc::new(ResponseCache::in_memory()),
            max_reasks: DEFAULT_MAX_REASKS,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_max_reasks(mut self, n: u32) -> Self {
        self.max_reasks = n;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn request(&self, prompt: PromptInstance, temperature: f64, sample_index: u32) -> CompletionRequest {
        CompletionRequest::new(prompt, temperature, sample_index, self.backend.id())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<ParsedResponse, GatewayError> {
        request.check()?;
        if request.backend_id != self.backend.id() {
            return Err(GatewayError::Prompt(format!(
                "request addressed to backend `{}` sent to `{}`",
                request.backend_id,
                self.backend.id()
            )));
        }
        let key = CacheKey::of(request);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let mut last_reason = String::new();
        let mut last_raw = String::new();
        for attempt in 0..=self.max_reasks {
            let raw = self.backend.complete_raw(request, attempt)?;
            match parse_response(&raw, request.schema_id) {
                Ok(parsed) => {
                    self.cache.insert(key, parsed.clone())?;
                    return Ok(parsed);
                }
                Err(reason) => {
                    log::debug!("schema violation on attempt {attempt}: {reason}");
                    last_reason = reason;
                    last_raw = raw;
                }
            }
        }
        Err(GatewayError::Parse {
            schema: request.schema_id,
            attempts: self.max_reasks + 1,
            reason: last_reason,
            raw_text: last_raw,
        })
    }

    /// Complete many requests; results come back in request order.
    pub fn complete_batch(
        &self,
        requests: &[CompletionRequest],
        exec: Execution,
    ) -> Vec<Result<ParsedResponse, GatewayError>> {
        exec.map(requests, |r| self.complete(r))
    }
}
