//! Question corpus: data model, JSONL ingestion, deterministic train/test splits.
//!
//! One unified line format covers every benchmark style:
//!
//! ```text
//! {"id": "q1", "domain": "mmlu-pro", "format": "multiple_choice",
//!  "question": "...", "options": [{"letter": "A", "text": "..."}], "gold": "E"}
//! ```
//!
//! `options` is present exactly when `format` is `multiple_choice`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::sha256_hex;
use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Record {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate question id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("cannot draw {train_n} train + {test_n} test questions from a set of {available}")]
    Sizing {
        train_n: usize,
        test_n: usize,
        available: usize,
    },
    #[error("unsupported corpus file `{0}` (expected .jsonl or .ndjson)")]
    UnsupportedFormat(PathBuf),
}

/// A question that violates its format invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("field `{field}`: {message}")]
pub struct InvalidQuestion {
    pub field: &'static str,
    pub message: String,
}

impl InvalidQuestion {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        InvalidQuestion {
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    MultipleChoice,
    Numeric,
    ShortAnswer,
}

impl AnswerFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnswerFormat::MultipleChoice => "multiple_choice",
            AnswerFormat::Numeric => "numeric",
            AnswerFormat::ShortAnswer => "short_answer",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "multiple_choice" => Some(AnswerFormat::MultipleChoice),
            "numeric" => Some(AnswerFormat::Numeric),
            "short_answer" => Some(AnswerFormat::ShortAnswer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub letter: String,
    pub text: String,
}

/// One QA item. Construct through [`Question::new`] or the loader so the
/// format invariants hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct Question {
    pub id: String,
    pub domain: String,
    pub format: AnswerFormat,
    pub text: String,
    pub options: Vec<AnswerOption>,
    pub gold: String,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        domain: impl Into<String>,
        format: AnswerFormat,
        text: impl Into<String>,
        options: Vec<AnswerOption>,
        gold: impl Into<String>,
    ) -> Result<Self, InvalidQuestion> {
        let q = Question {
            id: id.into(),
            domain: domain.into(),
            format,
            text: text.into(),
            options,
            gold: gold.into(),
        };
        q.validate()?;
        Ok(q)
    }

    /// Convenience constructor for multiple-choice items from `(letter, text)` pairs.
    pub fn multiple_choice(
        id: &str,
        domain: &str,
        text: &str,
        options: &[(&str, &str)],
        gold: &str,
    ) -> Result<Self, InvalidQuestion> {
        let options = options
            .iter()
            .map(|(l, t)| AnswerOption {
                letter: l.to_string(),
                text: t.to_string(),
            })
            .collect();
        Question::new(id, domain, AnswerFormat::MultipleChoice, text, options, gold)
    }

    pub fn option_letters(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.letter.as_str())
    }

    fn validate(&self) -> Result<(), InvalidQuestion> {
        if self.id.trim().is_empty() {
            return Err(InvalidQuestion::new("id", "must be a non-empty string"));
        }
        if self.gold.trim().is_empty() {
            return Err(InvalidQuestion::new("gold", "must be a non-empty string"));
        }
        match self.format {
            AnswerFormat::MultipleChoice => {
                if self.options.len() < 2 {
                    return Err(InvalidQuestion::new("options", "multiple_choice needs at least 2 options"));
                }
                let mut seen = HashSet::new();
                for opt in &self.options {
                    let l = opt.letter.trim();
                    if l.chars().count() != 1 || !l.chars().all(|c| c.is_ascii_uppercase()) {
                        return Err(InvalidQuestion::new("options", format!("letter `{}` is not a single uppercase letter", opt.letter)));
                    }
                    if !seen.insert(l) {
                        return Err(InvalidQuestion::new("options", format!("duplicate letter `{l}`")));
                    }
                }
                if !seen.contains(self.gold.as_str()) {
                    return Err(InvalidQuestion::new("gold", format!("`{}` is not one of the option letters", self.gold)));
                }
            }
            AnswerFormat::Numeric => {
                if !self.options.is_empty() {
                    return Err(InvalidQuestion::new("options", "only multiple_choice questions carry options"));
                }
                if self.gold.parse::<i64>().is_err() {
                    return Err(InvalidQuestion::new("gold", format!("`{}` is not an integer", self.gold)));
                }
            }
            AnswerFormat::ShortAnswer => {
                if !self.options.is_empty() {
                    return Err(InvalidQuestion::new("options", "only multiple_choice questions carry options"));
                }
            }
        }
        Ok(())
    }
}

/// Wire form of a corpus line. Every field is optional here so that a missing
/// field is reported by name instead of as a generic serde error.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<AnswerOption>>,
    #[serde(default)]
    gold: Option<serde_json::Value>,
}

impl RawRecord {
    fn into_question(self) -> Result<Question, InvalidQuestion> {
        let missing = |f: &'static str| InvalidQuestion::new(f, "missing");
        let id = self.id.ok_or_else(|| missing("id"))?;
        let domain = self.domain.ok_or_else(|| missing("domain"))?;
        let format_s = self.format.ok_or_else(|| missing("format"))?;
        let format = AnswerFormat::parse(&format_s)
            .ok_or_else(|| InvalidQuestion::new("format", format!("unknown format `{format_s}`")))?;
        let text = self.question.ok_or_else(|| missing("question"))?;
        let gold = match self.gold {
            None | Some(serde_json::Value::Null) => return Err(missing("gold")),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(InvalidQuestion::new("gold", format!("expected string, got {other}"))),
        };
        if format == AnswerFormat::MultipleChoice && self.options.is_none() {
            return Err(missing("options"));
        }
        Question::new(id, domain, format, text, self.options.unwrap_or_default(), gold)
    }
}

impl TryFrom<RawRecord> for Question {
    type Error = String;
    fn try_from(raw: RawRecord) -> Result<Self, Self::Error> {
        raw.into_question().map_err(|e| e.to_string())
    }
}

impl From<Question> for RawRecord {
    fn from(q: Question) -> Self {
        RawRecord {
            id: Some(q.id),
            domain: Some(q.domain),
            format: Some(q.format.as_str().to_string()),
            question: Some(q.text),
            options: (q.format == AnswerFormat::MultipleChoice).then_some(q.options),
            gold: Some(serde_json::Value::String(q.gold)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: String,
    /// Unix seconds.
    pub loaded_at: u64,
    /// SHA-256 of the canonical JSONL serialization of the questions.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSet {
    questions: Vec<Question>,
    index: HashMap<String, usize>,
    pub manifest: CorpusManifest,
}

impl QuestionSet {
    /// Build from already-validated questions, rejecting duplicate ids.
    pub fn from_questions(questions: Vec<Question>, source: &str) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if index.insert(q.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: q.id.clone(),
                });
            }
        }
        let digest = sha256_hex(to_jsonl_string(&questions).as_bytes());
        Ok(QuestionSet {
            questions,
            index,
            manifest: CorpusManifest {
                source: source.to_string(),
                loaded_at: unix_now(),
                digest,
            },
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Question> {
        self.questions.iter()
    }

    /// Canonical JSONL serialization; loading it back reproduces the same digest.
    pub fn to_jsonl(&self) -> String {
        to_jsonl_string(&self.questions)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Keep only the questions whose id is in `ids`, in corpus order.
    pub fn subset(&self, ids: &HashSet<&str>, source: &str) -> QuestionSet {
        let qs = self
            .questions
            .iter()
            .filter(|q| ids.contains(q.id.as_str()))
            .cloned()
            .collect();
        QuestionSet::from_questions(qs, source).expect("subset of a valid set has unique ids")
    }
}

fn to_jsonl_string(questions: &[Question]) -> String {
    crate::io::to_jsonl(questions).expect("questions always serialize")
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// Pick by extension.
    #[default]
    Auto,
    Jsonl,
}

/// Load a corpus file. Line order is preserved; blank lines are skipped.
pub fn load_corpus(path: &Path, format_hint: CorpusFormat) -> Result<QuestionSet, CorpusError> {
    if format_hint == CorpusFormat::Auto {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "jsonl" | "ndjson" | "json") {
            return Err(CorpusError::UnsupportedFormat(path.to_path_buf()));
        }
    }
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, &path.display().to_string())
}

/// Parse JSONL corpus text.
pub fn parse_corpus(text: &str, source: &str) -> Result<QuestionSet, CorpusError> {
    let mut questions = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            line: line_no,
            field: "record",
            message: e.to_string(),
        })?;
        let q = raw
            .into_question()
            .map_err(|e| CorpusError::Record {
                line: line_no,
                field: e.field,
                message: e.message,
            })?;
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: q.id,
            });
        }
        questions.push(q);
    }
    QuestionSet::from_questions(questions, source)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: QuestionSet,
    pub test: QuestionSet,
    pub seed: u64,
}

/// Persisted form of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            train_ids: self.train.iter().map(|q| q.id.clone()).collect(),
            test_ids: self.test.iter().map(|q| q.id.clone()).collect(),
        }
    }
}

/// Draw disjoint uniform random train/test subsets of exactly `train_n` and
/// `test_n` questions. Both subsets keep corpus order.
pub fn split_corpus(
    set: &QuestionSet,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    if train_n + test_n > set.len() {
        return Err(CorpusError::Sizing {
            train_n,
            test_n,
            available: set.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::stream(seed, "corpus-split", &[]));
    let mut train_idx = order[..train_n].to_vec();
    let mut test_idx = order[train_n..train_n + test_n].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize], name: &str| {
        let qs = idx.iter().map(|&i| set.questions[i].clone()).collect();
        QuestionSet::from_questions(qs, &format!("{}#{name}", set.manifest.source))
            .expect("subset of a valid set has unique ids")
    };
    Ok(CorpusSplit {
        train: pick(&train_idx, "train"),
        test: pick(&test_idx, "test"),
        seed,
    })
}

/// Synthetic short-answer bank used by the simulated backend, tests and benches.
/// Ids are `syn-00000`, `syn-00001`, ...
pub fn synthetic_bank(n: usize, domain: &str) -> QuestionSet {
    let qs = (0..n)
        .map(|i| Question {
            id: format!("syn-{i:05}"),
            domain: domain.to_string(),
            format: AnswerFormat::ShortAnswer,
            text: format!("Synthetic question number {i}?"),
            options: Vec::new(),
            gold: format!("answer {i}"),
        })
        .collect();
    QuestionSet::from_questions(qs, "synthetic").expect("synthetic ids are unique")
}
