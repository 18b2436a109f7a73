//! Answer-equivalence oracles used for clustering samples and grading short answers.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::normalize_answer;
use crate::corpus::{AnswerFormat, Question};
use crate::gateway::{ChatMessage, ChatTransport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("judge transport: {0}")]
    Transport(String),
    #[error("judge reply not understood: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    NormalizedExact,
    RemoteJudge,
    Table,
}

/// Why an equivalence question is asked; judges use a different prompt for each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Cluster,
    Grade,
}

pub trait EquivalenceOracle: Send + Sync {
    fn kind(&self) -> OracleKind;

    /// Are `a` and `b` the same answer to `question`? For [`Purpose::Grade`], `b` is the gold answer.
    fn equivalent(&self, a: &str, b: &str, question: &Question, purpose: Purpose) -> Result<bool, OracleError>;
}

/// Equality after short-answer normalization.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedExact;

impl EquivalenceOracle for NormalizedExact {
    fn kind(&self) -> OracleKind {
        OracleKind::NormalizedExact
    }

    fn equivalent(&self, a: &str, b: &str, _: &Question, _: Purpose) -> Result<bool, OracleError> {
        let norm = |s: &str| normalize_answer(s, AnswerFormat::ShortAnswer).unwrap_or_default();
        Ok(a == b || norm(a) == norm(b))
    }
}

/// Fixed symmetric equivalence table over canonical strings. Not transitive
/// unless the table says so.
#[derive(Debug, Clone, Default)]
pub struct TableOracle {
    pairs: HashSet<(String, String)>,
}

impl TableOracle {
    pub fn new(pairs: &[(&str, &str)]) -> Self {
        let mut set = HashSet::new();
        for (a, b) in pairs {
            set.insert((a.to_string(), b.to_string()));
            set.insert((b.to_string(), a.to_string()));
        }
        TableOracle { pairs: set }
    }
}

impl EquivalenceOracle for TableOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Table
    }

    fn equivalent(&self, a: &str, b: &str, _: &Question, _: Purpose) -> Result<bool, OracleError> {
        Ok(a == b || self.pairs.contains(&(a.to_string(), b.to_string())))
    }
}

/// Prompt templates for the LLM judge. Placeholders: `{question}`, `{a}`, `{b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeTemplates {
    pub cluster: String,
    pub grade: String,
}

impl Default for JudgeTemplates {
    fn default() -> Self {
        JudgeTemplates {
            cluster: "We are evaluating answers to the question: {question}\n\
                      Possible answer 1: {a}\n\
                      Possible answer 2: {b}\n\
                      Do these two answers mean the same thing in the context of the question? \
                      Reply with a JSON object {\"equivalent\": true} or {\"equivalent\": false}."
                .to_string(),
            grade: "Question: {question}\n\
                    Reference answer: {b}\n\
                    Proposed answer: {a}\n\
                    Is the proposed answer semantically equivalent to the reference answer within the \
                    context of the question? Reply with a JSON object {\"equivalent\": true} or {\"equivalent\": false}."
                .to_string(),
        }
    }
}

type PairKey = (String, Purpose, String, String);

/// LLM-backed oracle. Each unordered pair is asked once per question and
/// purpose, which makes the relation symmetric and reflexive on everything it
/// has answered.
pub struct RemoteJudge {
    transport: Arc<dyn ChatTransport>,
    templates: JudgeTemplates,
    max_reasks: u32,
    cache: Mutex<HashMap<PairKey, bool>>,
}

impl RemoteJudge {
    pub fn new(transport: Arc<dyn ChatTransport>, templates: JudgeTemplates) -> Self {
        RemoteJudge {
            transport,
            templates,
            max_reasks: 2,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn ask(&self, a: &str, b: &str, question: &Question, purpose: Purpose) -> Result<bool, OracleError> {
        let template = match purpose {
            Purpose::Cluster => &self.templates.cluster,
            Purpose::Grade => &self.templates.grade,
        };
        let prompt = template
            .replace("{question}", &question.text)
            .replace("{a}", a)
            .replace("{b}", b);
        let schema = serde_json::json!({
            "type": "object",
            "properties": {"equivalent": {"type": "boolean"}},
            "required": ["equivalent"],
            "additionalProperties": false
        });
        let mut last = String::new();
        for _ in 0..=self.max_reasks {
            let raw = self
                .transport
                .chat(&[ChatMessage::new("user", &prompt)], 0.0, "equivalence", &schema)
                .map_err(|e| OracleError::Transport(e.to_string()))?;
            match serde_json::from_str::<serde_json::Value>(raw.trim())
                .ok()
                .and_then(|v| v.get("equivalent").and_then(|e| e.as_bool()))
            {
                Some(v) => return Ok(v),
                None => last = raw,
            }
        }
        Err(OracleError::Parse(last))
    }
}

impl EquivalenceOracle for RemoteJudge {
    fn kind(&self) -> OracleKind {
        OracleKind::RemoteJudge
    }

    fn equivalent(&self, a: &str, b: &str, question: &Question, purpose: Purpose) -> Result<bool, OracleError> {
        if a == b {
            return Ok(true);
        }
        // grading is directional (answer vs gold), so only cluster queries are canonicalized
        let (x, y) = match purpose {
            Purpose::Cluster if a > b => (b, a),
            _ => (a, b),
        };
        let key = (question.id.clone(), purpose, x.to_string(), y.to_string());
        if let Some(&v) = self.cache.lock().expect("judge cache poisoned").get(&key) {
            return Ok(v);
        }
        let verdict = self.ask(x, y, question, purpose)?;
        self.cache.lock().expect("judge cache poisoned").insert(key, verdict);
        Ok(verdict)
    }
}
