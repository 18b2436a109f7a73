//! From N stochastic samples to a consistency record.
//!
//! Samples are normalized per answer format, grouped greedily into clusters of
//! equivalent answers, and the largest cluster gives the modal answer `x` and
//! the consistency score `s = |largest| / N`. The modal answer is then graded
//! against gold.

mod normalize;
mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use normalize::{normalize_answer, NormalizeError};
pub use oracle::{
    EquivalenceOracle, JudgeTemplates, NormalizedExact, OracleError, OracleKind, Purpose,
    RemoteJudge, TableOracle,
};

use crate::corpus::{Question, QuestionSet};
use crate::exec::Execution;
use crate::gateway::{render_single, Gateway};

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("at least one sample is required")]
    NoSamples,
    #[error("samples from several questions (`{0}` and `{1}`) passed to one clustering call")]
    MixedQuestions(String, String),
    #[error("duplicate sample index {0}")]
    DuplicateSample(u32),
    #[error("cluster sizes sum to {total}, expected {n}")]
    SizeMismatch { total: usize, n: usize },
    #[error("question `{question_id}`: oracle failed on ({a:?}, {b:?}): {source}")]
    Oracle {
        question_id: String,
        a: String,
        b: String,
        #[source]
        source: OracleError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSample {
    #[serde(skip)]
    pub question_id: String,
    #[serde(rename = "index")]
    pub sample_index: u32,
    pub canonical: String,
    pub raw: String,
    /// Set when the raw output could not be normalized; `canonical` is then a
    /// sentinel that never merges with another sample.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparseable: bool,
}

impl AnswerSample {
    /// Normalize `raw` for the question's format, falling back to a sentinel.
    pub fn from_raw(question: &Question, sample_index: u32, raw: &str) -> Self {
        match normalize_answer(raw, question.format) {
            Ok(canonical) => AnswerSample {
                question_id: question.id.clone(),
                sample_index,
                canonical,
                raw: raw.to_string(),
                unparseable: false,
            },
            Err(_) => AnswerSample::unparseable(&question.id, sample_index, raw),
        }
    }

    pub fn unparseable(question_id: &str, sample_index: u32, raw: &str) -> Self {
        AnswerSample {
            question_id: question_id.to_string(),
            sample_index,
            canonical: format!("<unparseable #{sample_index}>"),
            raw: raw.to_string(),
            unparseable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCluster {
    pub representative: String,
    pub members: Vec<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparseable: bool,
}

impl AnswerCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Greedy first-fit clustering in sample-index order: each sample joins the
/// first cluster whose representative the oracle accepts, otherwise it founds
/// a new cluster. Unparseable samples are always singletons.
pub fn cluster_answers(
    samples: &[AnswerSample],
    oracle: &dyn EquivalenceOracle,
    question: &Question,
) -> Result<Vec<AnswerCluster>, ConsistencyError> {
    let first = samples.first().ok_or(ConsistencyError::NoSamples)?;
    if let Some(other) = samples.iter().find(|s| s.question_id != first.question_id) {
        return Err(ConsistencyError::MixedQuestions(
            first.question_id.clone(),
            other.question_id.clone(),
        ));
    }
    let mut ordered: Vec<&AnswerSample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.sample_index);
    if let Some(w) = ordered.windows(2).find(|w| w[0].sample_index == w[1].sample_index) {
        return Err(ConsistencyError::DuplicateSample(w[0].sample_index));
    }

    let mut clusters: Vec<AnswerCluster> = Vec::new();
    for sample in ordered {
        if sample.unparseable {
            clusters.push(AnswerCluster {
                representative: sample.canonical.clone(),
                members: vec![sample.sample_index],
                unparseable: true,
            });
            continue;
        }
        let mut home = None;
        for (i, c) in clusters.iter().enumerate().filter(|(_, c)| !c.unparseable) {
            let same = sample.canonical == c.representative
                || oracle
                    .equivalent(&c.representative, &sample.canonical, question, Purpose::Cluster)
                    .map_err(|source| ConsistencyError::Oracle {
                        question_id: question.id.clone(),
                        a: c.representative.clone(),
                        b: sample.canonical.clone(),
                        source,
                    })?;
            if same {
                home = Some(i);
                break;
            }
        }
        match home {
            Some(i) => clusters[i].members.push(sample.sample_index),
            None => clusters.push(AnswerCluster {
                representative: sample.canonical.clone(),
                members: vec![sample.sample_index],
                unparseable: false,
            }),
        }
    }
    Ok(clusters)
}

/// The modal answer of a clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalAnswer {
    pub answer: String,
    pub support: usize,
    pub score: f64,
    pub unparseable: bool,
}

/// Largest cluster over `n` samples. Ties on size go to the lexicographically
/// smallest representative, preferring parseable clusters.
pub fn consistency_score(clusters: &[AnswerCluster], n: usize) -> Result<ModalAnswer, ConsistencyError> {
    if clusters.is_empty() || n == 0 {
        return Err(ConsistencyError::NoSamples);
    }
    let total: usize = clusters.iter().map(AnswerCluster::size).sum();
    if total != n {
        return Err(ConsistencyError::SizeMismatch { total, n });
    }
    let best = clusters
        .iter()
        .min_by(|a, b| {
            b.size()
                .cmp(&a.size())
                .then(a.unparseable.cmp(&b.unparseable))
                .then_with(|| a.representative.cmp(&b.representative))
        })
        .expect("non-empty");
    Ok(ModalAnswer {
        answer: best.representative.clone(),
        support: best.size(),
        score: best.size() as f64 / n as f64,
        unparseable: best.unparseable,
    })
}

/// Exact canonical match for multiple-choice and numeric questions; oracle
/// verdict in the question's context for short answers.
pub fn grade_answer(
    answer: &str,
    question: &Question,
    oracle: &dyn EquivalenceOracle,
) -> Result<bool, OracleError> {
    use crate::corpus::AnswerFormat;
    let gold = normalize_answer(&question.gold, question.format)
        .unwrap_or_else(|_| question.gold.clone());
    match question.format {
        AnswerFormat::MultipleChoice | AnswerFormat::Numeric => Ok(answer == gold),
        AnswerFormat::ShortAnswer => {
            if answer == gold {
                Ok(true)
            } else {
                oracle.equivalent(answer, &gold, question, Purpose::Grade)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    #[serde(rename = "id")]
    pub question_id: String,
    #[serde(rename = "modal")]
    pub modal_answer: String,
    #[serde(rename = "s")]
    pub score: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub correct: bool,
    /// Cluster sizes in founding order.
    pub clusters: Vec<usize>,
    #[serde(default)]
    pub samples: Vec<AnswerSample>,
}

impl ConsistencyRecord {
    /// Size of the largest cluster, i.e. `s * N`.
    pub fn modal_count(&self) -> usize {
        self.clusters.iter().copied().max().unwrap_or(0)
    }

    /// Build a record without sample provenance (fixtures, tests, imports).
    pub fn synthetic(id: &str, modal_count: usize, n: usize, correct: bool) -> Self {
        assert!(modal_count >= 1 && modal_count <= n, "modal count must lie in 1..=n");
        let mut clusters = vec![modal_count];
        clusters.extend(std::iter::repeat_n(1, n - modal_count));
        ConsistencyRecord {
            question_id: id.to_string(),
            modal_answer: format!("answer-{id}"),
            score: modal_count as f64 / n as f64,
            n_samples: n,
            correct,
            clusters,
            samples: Vec::new(),
        }
    }

    /// Restore `question_id` on samples after deserialization.
    pub fn relink_samples(&mut self) {
        for s in &mut self.samples {
            s.question_id = self.question_id.clone();
        }
    }
}

/// Turn N samples of one question into its record.
pub fn record_from_samples(
    question: &Question,
    samples: Vec<AnswerSample>,
    oracle: &dyn EquivalenceOracle,
) -> Result<ConsistencyRecord, ConsistencyError> {
    let n = samples.len();
    let clusters = cluster_answers(&samples, oracle, question)?;
    let modal = consistency_score(&clusters, n)?;
    let correct = if modal.unparseable {
        false
    } else {
        grade_answer(&modal.answer, question, oracle).map_err(|source| ConsistencyError::Oracle {
            question_id: question.id.clone(),
            a: modal.answer.clone(),
            b: question.gold.clone(),
            source,
        })?
    };
    let mut samples = samples;
    samples.sort_by_key(|s| s.sample_index);
    Ok(ConsistencyRecord {
        question_id: question.id.clone(),
        modal_answer: modal.answer,
        score: modal.score,
        n_samples: n,
        correct,
        clusters: clusters.iter().map(AnswerCluster::size).collect(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsistencyRun {
    pub records: Vec<ConsistencyRecord>,
    pub exclusions: Vec<Exclusion>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub temperature: f64,
    /// A question is excluded when more than this fraction of its samples is unparseable.
    pub max_unparseable_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_samples: 10,
            temperature: 1.0,
            max_unparseable_fraction: 0.5,
        }
    }
}

/// Sample every question `n_samples` times and build its record. Questions
/// whose sampling or grading fails land in the exclusions report; the run
/// continues. Output follows corpus order.
pub fn build_consistency_records(
    questions: &QuestionSet,
    gateway: &Gateway,
    config: SamplingConfig,
    oracle: &dyn EquivalenceOracle,
    exec: Execution,
) -> Result<ConsistencyRun, ConsistencyError> {
    if config.n_samples == 0 {
        return Err(ConsistencyError::NoSamples);
    }
    let outcomes = exec.map(questions.questions(), |q| sample_question(q, gateway, config, oracle));
    let mut run = ConsistencyRun::default();
    for (q, outcome) in questions.iter().zip(outcomes) {
        match outcome {
            Ok(r) => run.records.push(r),
            Err(reason) => run.exclusions.push(Exclusion {
                id: q.id.clone(),
                reason,
            }),
        }
    }
    Ok(run)
}

fn sample_question(
    q: &Question,
    gateway: &Gateway,
    config: SamplingConfig,
    oracle: &dyn EquivalenceOracle,
) -> Result<ConsistencyRecord, String> {
    let prompt = render_single(q);
    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples as u32 {
        let req = gateway.request(prompt.clone(), config.temperature, i);
        let sample = match gateway.complete(&req) {
            Ok(resp) => AnswerSample::from_raw(q, i, &resp.answers[0]),
            Err(crate::gateway::GatewayError::Parse { raw_text, .. }) => {
                AnswerSample::unparseable(&q.id, i, &raw_text)
            }
            Err(e) => return Err(format!("sample {i}: {e}")),
        };
        samples.push(sample);
    }
    let bad = samples.iter().filter(|s| s.unparseable).count();
    if bad as f64 > config.max_unparseable_fraction * config.n_samples as f64 {
        return Err(format!("{bad} of {} samples unparseable", config.n_samples));
    }
    record_from_samples(q, samples, oracle).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_bank, AnswerFormat};

    fn short_q() -> Question {
        Question::new("t1", "triviaqa", AnswerFormat::ShortAnswer, "Which county is Leeds in?", vec![], "Yorkshire").unwrap()
    }

    fn samples(q: &Question, raws: &[&str]) -> Vec<AnswerSample> {
        raws.iter()
            .enumerate()
            .map(|(i, r)| AnswerSample::from_raw(q, i as u32, r))
            .collect()
    }

    #[test]
    fn identical_answers_form_one_cluster() {
        let q = short_q();
        let c = cluster_answers(&samples(&q, &["york"; 10]), &NormalizedExact, &q).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size(), 10);
    }

    #[test]
    fn distinct_answers_stay_singletons() {
        let q = short_q();
        let raws: Vec<String> = (0..10).map(|i| format!("answer {i}")).collect();
        let raws: Vec<&str> = raws.iter().map(String::as_str).collect();
        let c = cluster_answers(&samples(&q, &raws), &NormalizedExact, &q).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|c| c.size() == 1));
    }

    #[test]
    fn table_oracle_merges_paraphrase() {
        let q = short_q();
        let oracle = TableOracle::new(&[("yorkshire", "county of yorkshire")]);
        let c = cluster_answers(&samples(&q, &["yorkshire", "yorkshire", "county of yorkshire"]), &oracle, &q).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members, vec![0, 1, 2]);
        assert_eq!(c[0].representative, "yorkshire");
    }

    #[test]
    fn greedy_first_fit_follows_sample_index() {
        // "b" ~ "a" and "b" ~ "c" but "a" !~ "c": the outcome depends on order,
        // and order is sample_index regardless of slice order.
        let q = short_q();
        let oracle = TableOracle::new(&[("a", "b"), ("b", "c")]);
        let mut s = samples(&q, &["c", "a", "b"]);
        s.reverse();
        let c = cluster_answers(&s, &oracle, &q).unwrap();
        assert_eq!(c[0].representative, "c");
        assert_eq!(c[0].members, vec![0, 2]);
        assert_eq!(c[1].members, vec![1]);
    }

    #[test]
    fn clustering_rejects_bad_input() {
        let q = short_q();
        assert!(matches!(cluster_answers(&[], &NormalizedExact, &q), Err(ConsistencyError::NoSamples)));
        let mut s = samples(&q, &["a", "b"]);
        s[1].sample_index = 0;
        assert!(matches!(cluster_answers(&s, &NormalizedExact, &q), Err(ConsistencyError::DuplicateSample(0))));
        let mut s = samples(&q, &["a", "b"]);
        s[1].question_id = "other".into();
        assert!(matches!(cluster_answers(&s, &NormalizedExact, &q), Err(ConsistencyError::MixedQuestions(..))));
    }

    fn cluster(rep: &str, size: usize) -> AnswerCluster {
        AnswerCluster {
            representative: rep.into(),
            members: (0..size as u32).collect(),
            unparseable: false,
        }
    }

    #[test]
    fn score_is_largest_cluster_fraction() {
        let m = consistency_score(&[cluster("x", 6), cluster("y", 3), cluster("z", 1)], 10).unwrap();
        assert_eq!((m.answer.as_str(), m.score), ("x", 0.6));
        let m = consistency_score(&[cluster("x", 10)], 10).unwrap();
        assert_eq!(m.score, 1.0);
    }

    #[test]
    fn ties_break_to_smallest_representative() {
        let m = consistency_score(&[cluster("b", 5), cluster("a", 5)], 10).unwrap();
        assert_eq!((m.answer.as_str(), m.score), ("a", 0.5));
    }

    #[test]
    fn tie_break_exhaustive_two_clusters() {
        // Enumerate every 2-cluster split of N = 10 in both orders with
        // representatives "a"/"b"; the winner is the larger cluster, "a" on a tie.
        for k in 1..10 {
            for (r1, r2) in [("a", "b"), ("b", "a")] {
                let m = consistency_score(&[cluster(r1, k), cluster(r2, 10 - k)], 10).unwrap();
                let expect = match k.cmp(&(10 - k)) {
                    std::cmp::Ordering::Greater => r1,
                    std::cmp::Ordering::Less => r2,
                    std::cmp::Ordering::Equal => "a",
                };
                assert_eq!(m.answer, expect, "k={k} reps=({r1},{r2})");
                assert_eq!(m.support, k.max(10 - k));
            }
        }
    }

    #[test]
    fn score_errors() {
        assert!(matches!(consistency_score(&[], 10), Err(ConsistencyError::NoSamples)));
        assert!(matches!(
            consistency_score(&[cluster("a", 4)], 10),
            Err(ConsistencyError::SizeMismatch { total: 4, n: 10 })
        ));
    }

    #[test]
    fn unparseable_samples_are_singletons_and_never_modal_on_ties() {
        let q = short_q();
        let mut s = samples(&q, &["zeta", "omega"]);
        s.push(AnswerSample::unparseable(&q.id, 2, "???"));
        s.push(AnswerSample::unparseable(&q.id, 3, "???"));
        let c = cluster_answers(&s, &NormalizedExact, &q).unwrap();
        assert_eq!(c.len(), 4);
        let m = consistency_score(&c, 4).unwrap();
        assert_eq!(m.answer, "omega");
        assert!(!m.unparseable);
    }

    #[test]
    fn grading_exact_formats() {
        let mc = Question::multiple_choice("m", "d", "q", &[("A", "a"), ("E", "e")], "E").unwrap();
        assert!(grade_answer("E", &mc, &NormalizedExact).unwrap());
        assert!(!grade_answer("A", &mc, &NormalizedExact).unwrap());
        let num = Question::new("n", "gsm8k", AnswerFormat::Numeric, "q", vec![], "99").unwrap();
        assert!(grade_answer("99", &num, &NormalizedExact).unwrap());
        assert!(!grade_answer("98", &num, &NormalizedExact).unwrap());
    }

    #[test]
    fn grading_short_answer_uses_normalization() {
        let q = short_q();
        assert!(grade_answer("yorkshire", &q, &NormalizedExact).unwrap());
        assert!(!grade_answer("lancashire", &q, &NormalizedExact).unwrap());
        let oracle = TableOracle::new(&[("county of yorkshire", "yorkshire")]);
        assert!(grade_answer("county of yorkshire", &q, &oracle).unwrap());
    }

    #[test]
    fn oracle_failure_is_an_error_not_a_wrong_grade() {
        struct Broken;
        impl EquivalenceOracle for Broken {
            fn kind(&self) -> OracleKind {
                OracleKind::RemoteJudge
            }
            fn equivalent(&self, _: &str, _: &str, _: &Question, _: Purpose) -> Result<bool, OracleError> {
                Err(OracleError::Transport("down".into()))
            }
        }
        assert!(grade_answer("lancashire", &short_q(), &Broken).is_err());
        let q = short_q();
        match cluster_answers(&samples(&q, &["a", "b"]), &Broken, &q) {
            Err(ConsistencyError::Oracle { a, b, .. }) => assert_eq!((a.as_str(), b.as_str()), ("a", "b")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_serializes_with_expected_fields() {
        let q = short_q();
        let r = record_from_samples(&q, samples(&q, &["Yorkshire.", "yorkshire", "Kent"]), &NormalizedExact).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for f in ["id", "modal", "s", "n", "correct", "clusters", "samples"] {
            assert!(v.get(f).is_some(), "missing {f}");
        }
        assert_eq!(v["modal"], "yorkshire");
        assert_eq!(v["clusters"], serde_json::json!([2, 1]));
        assert_eq!(v["correct"], true);
        let mut back: ConsistencyRecord = serde_json::from_value(v).unwrap();
        back.relink_samples();
        assert_eq!(back, r);
    }

    #[test]
    fn zero_samples_is_an_error() {
        let bank = synthetic_bank(1, "d");
        let prof = crate::gateway::SimulatedModelProfile::new(
            bank.iter().map(|q| (q.id.clone(), 1.0)).collect(),
            1,
        );
        let gw = Gateway::new(std::sync::Arc::new(
            crate::gateway::SimulatedBackend::new("sim", &bank, prof, 0).unwrap(),
        ));
        let cfg = SamplingConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert!(build_consistency_records(&bank, &gw, cfg, &NormalizedExact, Execution::Sequential).is_err());
    }
}
