use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{level_of, targets_for, AccuracyCurve, ConfidenceTarget, TargetError};
use crate::consistency::ConsistencyRecord;
use crate::corpus::QuestionSet;
use crate::gateway::{render_comparison, render_single, ChatMessage, Choice};
use crate::io::sha256_hex;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskTag {
    S,
    C,
}

impl TaskTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::S => "S",
            TaskTag::C => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftInstance {
    pub task: TaskTag,
    pub system_text: Option<String>,
    pub prompt_text: String,
    pub target_text: String,
    pub question_ids: Vec<String>,
}

pub fn single_target_text(answer: &str, confidence: f64) -> String {
    format!("The answer is {answer} and my confidence score is {confidence:.2}")
}

pub fn comparison_target_text(label: Choice) -> String {
    format!("The answer is {label}")
}

static SINGLE_TARGET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^The answer is (.+) and my confidence score is ([01]\.\d{2})$").unwrap());

/// Recover `(answer, confidence)` from a single-question target sentence.
pub fn parse_single_target(text: &str) -> Option<(String, f64)> {
    let caps = SINGLE_TARGET.captures(text)?;
    let c: f64 = caps[2].parse().ok()?;
    (c <= 1.0).then(|| (caps[1].to_string(), c))
}

pub fn parse_comparison_target(text: &str) -> Option<Choice> {
    match text.strip_prefix("The answer is ")? {
        "Q1" => Some(Choice::Q1),
        "Q2" => Some(Choice::Q2),
        _ => None,
    }
}

/// One S instance per record, in record order. Returns the instances and the
/// full-precision targets behind them.
pub fn build_single_sft(
    records: &[ConsistencyRecord],
    questions: &QuestionSet,
    curve: &AccuracyCurve,
    seed: u64,
) -> Result<(Vec<SftInstance>, Vec<ConfidenceTarget>), TargetError> {
    let targets = targets_for(records, curve, seed)?;
    let instances = records
        .iter()
        .zip(&targets)
        .map(|(r, t)| {
            let q = questions
                .get(&r.question_id)
                .ok_or_else(|| TargetError::UnknownQuestion(r.question_id.clone()))?;
            let prompt = render_single(q);
            Ok(SftInstance {
                task: TaskTag::S,
                system_text: prompt.system_text,
                prompt_text: prompt.user_text,
                target_text: single_target_text(&r.modal_answer, t.target),
                question_ids: vec![r.question_id.clone()],
            })
        })
        .collect::<Result<Vec<_>, TargetError>>()?;
    Ok((instances, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonInstance {
    pub q1_id: String,
    pub q2_id: String,
    pub s1: f64,
    pub s2: f64,
    pub label: Choice,
}

/// Number of unordered pairs whose consistency levels differ.
fn permissible_pairs(levels: &[usize]) -> usize {
    let n = levels.len();
    let mut per_level: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in levels {
        *per_level.entry(k).or_insert(0) += 1;
    }
    n * n.saturating_sub(1) / 2 - per_level.values().map(|c| c * (c - 1) / 2).sum::<usize>()
}

/// Sample `n_pairs` distinct unordered pairs of records with unequal
/// consistency. Exactly `ceil(n/2)` pairs put the more consistent question
/// first, the rest second, in random arrangement.
pub fn build_pair_sft(
    records: &[ConsistencyRecord],
    n_pairs: usize,
    rng: &mut StreamRng,
) -> Result<Vec<ComparisonInstance>, TargetError> {
    let levels = records.iter().map(level_of).collect::<Result<Vec<_>, _>>()?;
    let available = permissible_pairs(&levels);
    if available == 0 {
        return Err(TargetError::NoPermissiblePairs);
    }
    if n_pairs > available {
        return Err(TargetError::TooManyPairs {
            requested: n_pairs,
            available,
        });
    }

    let n = records.len();
    let pairs: Vec<(usize, usize)> = if 2 * n_pairs <= available {
        let mut seen = HashSet::with_capacity(n_pairs);
        let mut out = Vec::with_capacity(n_pairs);
        while out.len() < n_pairs {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if levels[i] != levels[j] && seen.insert((i.min(j), i.max(j))) {
                out.push((i.min(j), i.max(j)));
            }
        }
        out
    } else {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| levels[i] != levels[j])
            .collect();
        let (chosen, _) = all.partial_shuffle(rng, n_pairs);
        chosen.to_vec()
    };

    let mut labels: Vec<Choice> = (0..n_pairs)
        .map(|i| if i < n_pairs.div_ceil(2) { Choice::Q1 } else { Choice::Q2 })
        .collect();
    labels.shuffle(rng);

    Ok(pairs
        .into_iter()
        .zip(labels)
        .map(|((i, j), label)| {
            let (hi, lo) = if levels[i] > levels[j] { (i, j) } else { (j, i) };
            let (a, b) = match label {
                Choice::Q1 => (hi, lo),
                Choice::Q2 => (lo, hi),
            };
            ComparisonInstance {
                q1_id: records[a].question_id.clone(),
                q2_id: records[b].question_id.clone(),
                s1: records[a].score,
                s2: records[b].score,
                label,
            }
        })
        .collect())
}

/// Render comparison instances as C-task training examples (no system message).
pub fn comparison_sft(instances: &[ComparisonInstance], questions: &QuestionSet) -> Result<Vec<SftInstance>, TargetError> {
    let lookup = |id: &str| questions.get(id).ok_or_else(|| TargetError::UnknownQuestion(id.to_string()));
    instances
        .iter()
        .map(|c| {
            let prompt = render_comparison(lookup(&c.q1_id)?, lookup(&c.q2_id)?)?;
            Ok(SftInstance {
                task: TaskTag::C,
                system_text: prompt.system_text,
                prompt_text: prompt.user_text,
                target_text: comparison_target_text(c.label),
                question_ids: vec![c.q1_id.clone(), c.q2_id.clone()],
            })
        })
        .collect()
}

/// Concatenate both task sets and shuffle.
pub fn merge_multitask(s_set: &[SftInstance], c_set: &[SftInstance], rng: &mut StreamRng) -> Vec<SftInstance> {
    let mut all: Vec<SftInstance> = s_set.iter().chain(c_set).cloned().collect();
    all.shuffle(rng);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FinetuneMeta {
    task: TaskTag,
    question_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FinetuneLine {
    messages: Vec<ChatMessage>,
    meta: FinetuneMeta,
}

impl From<&SftInstance> for FinetuneLine {
    fn from(inst: &SftInstance) -> Self {
        let mut messages = Vec::with_capacity(3);
        if let Some(sys) = &inst.system_text {
            messages.push(ChatMessage::new("system", sys));
        }
        messages.push(ChatMessage::new("user", &inst.prompt_text));
        messages.push(ChatMessage::new("assistant", &inst.target_text));
        FinetuneLine {
            messages,
            meta: FinetuneMeta {
                task: inst.task,
                question_ids: inst.question_ids.clone(),
            },
        }
    }
}

/// Training settings a provider-side run would use. Recorded, never executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryHyperparameters {
    pub provider: String,
    pub epochs: u32,
    pub learning_rate_multiplier: Option<f64>,
}

impl AdvisoryHyperparameters {
    pub fn defaults() -> Vec<Self> {
        vec![
            AdvisoryHyperparameters {
                provider: "openai".into(),
                epochs: 10,
                learning_rate_multiplier: Some(2.0),
            },
            AdvisoryHyperparameters {
                provider: "fireworks".into(),
                epochs: 5,
                learning_rate_multiplier: None,
            },
        ]
    }
}

/// Provenance written alongside an exported file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportContext {
    pub seeds: BTreeMap<String, u64>,
    pub source_splits: Vec<String>,
    pub curve: Option<AccuracyCurve>,
    pub targets: Vec<ConfidenceTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub file: String,
    pub sha256: String,
    pub count: usize,
    pub counts: BTreeMap<TaskTag, usize>,
    pub seeds: BTreeMap<String, u64>,
    pub source_splits: Vec<String>,
    pub advisory: Vec<AdvisoryHyperparameters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<AccuracyCurve>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<ConfidenceTarget>,
}

/// Write chat-format JSONL, one example per line.
pub fn export_finetune_file(
    instances: &[SftInstance],
    path: &Path,
    context: ExportContext,
) -> Result<FinetuneManifest, TargetError> {
    let lines: Vec<FinetuneLine> = instances.iter().map(FinetuneLine::from).collect();
    let text = crate::io::to_jsonl(&lines).expect("fine-tune lines serialize");
    std::fs::write(path, &text).map_err(|source| TargetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut counts = BTreeMap::from([(TaskTag::S, 0), (TaskTag::C, 0)]);
    for i in instances {
        *counts.entry(i.task).or_insert(0) += 1;
    }
    Ok(FinetuneManifest {
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: sha256_hex(text.as_bytes()),
        count: instances.len(),
        counts,
        seeds: context.seeds,
        source_splits: context.source_splits,
        advisory: AdvisoryHyperparameters::defaults(),
        curve: context.curve,
        targets: context.targets,
    })
}

pub fn read_finetune_file(path: &Path) -> Result<Vec<SftInstance>, TargetError> {
    let lines: Vec<FinetuneLine> = crate::io::read_jsonl(path).map_err(|source| TargetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let bad = |message: &str| TargetError::Malformed {
                line: i + 1,
                message: message.to_string(),
            };
            let mut msgs = l.messages.into_iter().peekable();
            let system_text = msgs.next_if(|m| m.role == "system").map(|m| m.content);
            let user = msgs.next().filter(|m| m.role == "user").ok_or_else(|| bad("expected a user message"))?;
            let assistant = msgs
                .next()
                .filter(|m| m.role == "assistant")
                .ok_or_else(|| bad("expected an assistant message"))?;
            if msgs.next().is_some() {
                return Err(bad("unexpected trailing message"));
            }
            Ok(SftInstance {
                task: l.meta.task,
                system_text,
                prompt_text: user.content,
                target_text: assistant.content,
                question_ids: l.meta.question_ids,
            })
        })
        .collect()
}
