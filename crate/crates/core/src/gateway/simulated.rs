//! Deterministic simulated answerer.
//!
//! Each question carries a latent probability of producing the gold answer.
//! Stochastic calls (temperature > 0) emit gold with that probability and
//! otherwise one of `distractors` wrong answers uniformly; temperature 0 is
//! greedy and returns whichever single answer is most likely. Every call draws
//! from a stream keyed by `(seed, question ids, sample index, temperature)` so
//! results do not depend on call order or thread count.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Backend, Choice, CompletionRequest, GatewayError, ParsedResponse, Task};
use crate::corpus::{AnswerFormat, Question, QuestionSet};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerbalizationPolicy {
    /// Always state the same confidence.
    FixedOverconfident { confidence: f64 },
    /// State the per-question readout value exactly.
    OracleReadout,
    /// Readout plus Gaussian noise, clamped to [0, 1].
    NoisyReadout { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComparisonPolicy {
    PickHigherLatent,
    PickRandom,
    PickHigherLatentWithFlip { flip: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedModelProfile {
    /// Probability of emitting the gold answer, per question id.
    pub correctness: HashMap<String, f64>,
    /// Value read out by the readout verbalization policies. Falls back to `correctness`.
    #[serde(default)]
    pub readout: HashMap<String, f64>,
    /// Value compared by the comparison policies. Falls back to `readout`, then `correctness`.
    #[serde(default)]
    pub comparison_latent: HashMap<String, f64>,
    pub distractors: usize,
    pub verbalization: VerbalizationPolicy,
    pub comparison: ComparisonPolicy,
}

impl SimulatedModelProfile {
    pub fn new(correctness: HashMap<String, f64>, distractors: usize) -> Self {
        SimulatedModelProfile {
            correctness,
            readout: HashMap::new(),
            comparison_latent: HashMap::new(),
            distractors,
            verbalization: VerbalizationPolicy::OracleReadout,
            comparison: ComparisonPolicy::PickHigherLatent,
        }
    }

    pub fn with_verbalization(mut self, policy: VerbalizationPolicy) -> Self {
        self.verbalization = policy;
        self
    }

    pub fn with_comparison(mut self, policy: ComparisonPolicy) -> Self {
        self.comparison = policy;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Profile(m));
        if self.distractors == 0 {
            return bad("distractor count must be >= 1".into());
        }
        for (name, map) in [
            ("correctness", &self.correctness),
            ("readout", &self.readout),
            ("comparison_latent", &self.comparison_latent),
        ] {
            if let Some((id, p)) = map.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
                return bad(format!("{name} for `{id}` is {p}, outside [0, 1]"));
            }
        }
        match self.verbalization {
            VerbalizationPolicy::FixedOverconfident { confidence } if !(0.0..=1.0).contains(&confidence) => {
                return bad(format!("fixed confidence {confidence} outside [0, 1]"))
            }
            VerbalizationPolicy::NoisyReadout { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return bad(format!("noise sigma {sigma} must be >= 0"))
            }
            _ => {}
        }
        if let ComparisonPolicy::PickHigherLatentWithFlip { flip } = self.comparison {
            if !(0.0..=0.5).contains(&flip) {
                return bad(format!("flip rate {flip} outside [0, 0.5]"));
            }
        }
        Ok(())
    }

    fn p(&self, id: &str) -> Result<f64, GatewayError> {
        self.correctness
            .get(id)
            .copied()
            .ok_or_else(|| GatewayError::UnknownQuestion(id.to_string()))
    }

    fn readout_value(&self, id: &str) -> Result<f64, GatewayError> {
        match self.readout.get(id) {
            Some(&v) => Ok(v),
            None => self.p(id),
        }
    }

    fn latent(&self, id: &str) -> Result<f64, GatewayError> {
        match self.comparison_latent.get(id) {
            Some(&v) => Ok(v),
            None => self.readout_value(id),
        }
    }

    fn verbalize(&self, id: &str, rng: &mut StreamRng) -> Result<f64, GatewayError> {
        Ok(match self.verbalization {
            VerbalizationPolicy::FixedOverconfident { confidence } => confidence,
            VerbalizationPolicy::OracleReadout => self.readout_value(id)?,
            VerbalizationPolicy::NoisyReadout { sigma } => {
                let base = self.readout_value(id)?;
                if sigma == 0.0 {
                    base
                } else {
                    let noise = Normal::new(0.0, sigma).expect("sigma validated").sample(rng);
                    (base + noise).clamp(0.0, 1.0)
                }
            }
        })
    }
}

/// The `j`-th wrong answer (1-based) for a question, rendered in its format:
/// another option letter, `gold + j`, or the string `wrong-j`.
pub fn distractor(q: &Question, j: usize) -> String {
    match q.format {
        AnswerFormat::MultipleChoice => {
            let others: Vec<&str> = q.option_letters().filter(|l| *l != q.gold).collect();
            others[(j - 1) % others.len()].to_string()
        }
        AnswerFormat::Numeric => {
            let gold: i64 = q.gold.parse().expect("numeric gold validated at load");
            (gold + j as i64).to_string()
        }
        AnswerFormat::ShortAnswer => format!("wrong-{j}"),
    }
}

fn draw(q: &Question, p: f64, k: usize, rng: &mut StreamRng) -> String {
    if rng.random::<f64>() < p {
        q.gold.clone()
    } else {
        distractor(q, rng.random_range(1..=k))
    }
}

fn greedy(q: &Question, p: f64, k: usize) -> String {
    if p >= (1.0 - p) / k as f64 {
        q.gold.clone()
    } else {
        distractor(q, 1)
    }
}

fn single_response(answer: String, confidence: f64) -> ParsedResponse {
    let raw_text = serde_json::json!({"answer": answer, "confidence": confidence}).to_string();
    ParsedResponse {
        answers: vec![answer],
        confidence: Some(confidence),
        choice: None,
        raw_text,
    }
}

/// One stochastic single-question answer.
pub fn simulate_answer(
    question: &Question,
    profile: &SimulatedModelProfile,
    rng: &mut StreamRng,
) -> Result<ParsedResponse, GatewayError> {
    let p = profile.p(&question.id)?;
    let answer = draw(question, p, profile.distractors, rng);
    let confidence = profile.verbalize(&question.id, rng)?;
    Ok(single_response(answer, confidence))
}

/// The temperature-0 answer: the single most likely output.
pub fn simulate_greedy_answer(
    question: &Question,
    profile: &SimulatedModelProfile,
    rng: &mut StreamRng,
) -> Result<ParsedResponse, GatewayError> {
    let p = profile.p(&question.id)?;
    let answer = greedy(question, p, profile.distractors);
    let confidence = profile.verbalize(&question.id, rng)?;
    Ok(single_response(answer, confidence))
}

pub struct SimulatedBackend {
    id: String,
    questions: HashMap<String, Question>,
    profile: SimulatedModelProfile,
    seed: u64,
}

impl SimulatedBackend {
    pub fn new(
        id: &str,
        questions: &QuestionSet,
        profile: SimulatedModelProfile,
        seed: u64,
    ) -> Result<Self, GatewayError> {
        profile.validate()?;
        Ok(SimulatedBackend {
            id: id.to_string(),
            questions: questions.iter().map(|q| (q.id.clone(), q.clone())).collect(),
            profile,
            seed,
        })
    }

    pub fn profile(&self) -> &SimulatedModelProfile {
        &self.profile
    }

    fn question(&self, id: &str) -> Result<&Question, GatewayError> {
        self.questions
            .get(id)
            .ok_or_else(|| GatewayError::UnknownQuestion(id.to_string()))
    }

    fn stream(&self, req: &CompletionRequest) -> StreamRng {
        let mut parts: Vec<&[u8]> = req.prompt.question_ids.iter().map(|s| s.as_bytes()).collect();
        let idx = req.sample_index.to_le_bytes();
        let temp = req.temperature.to_bits().to_le_bytes();
        parts.push(&idx);
        parts.push(&temp);
        rng::stream(self.seed, "simulated-answer", &parts)
    }

    fn answer(&self, q: &Question, temperature: f64, rng: &mut StreamRng) -> Result<String, GatewayError> {
        let p = self.profile.p(&q.id)?;
        Ok(if temperature == 0.0 {
            greedy(q, p, self.profile.distractors)
        } else {
            draw(q, p, self.profile.distractors, rng)
        })
    }

    fn choose(&self, id1: &str, id2: &str, rng: &mut StreamRng) -> Result<Choice, GatewayError> {
        let higher = |rng: &mut StreamRng| -> Result<Choice, GatewayError> {
            let (l1, l2) = (self.profile.latent(id1)?, self.profile.latent(id2)?);
            Ok(if l1 > l2 {
                Choice::Q1
            } else if l2 > l1 {
                Choice::Q2
            } else if rng.random::<bool>() {
                Choice::Q1
            } else {
                Choice::Q2
            })
        };
        Ok(match self.profile.comparison {
            ComparisonPolicy::PickHigherLatent => higher(rng)?,
            ComparisonPolicy::PickRandom => {
                if rng.random::<bool>() {
                    Choice::Q1
                } else {
                    Choice::Q2
                }
            }
            ComparisonPolicy::PickHigherLatentWithFlip { flip } => {
                let c = higher(rng)?;
                if rng.random::<f64>() < flip {
                    c.other()
                } else {
                    c
                }
            }
        })
    }
}

impl Backend for SimulatedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, req: &CompletionRequest, _attempt: u32) -> Result<String, GatewayError> {
        let mut rng = self.stream(req);
        let ids = &req.prompt.question_ids;
        match req.prompt.task {
            Task::SingleQuestion => {
                let q = self.question(&ids[0])?;
                let answer = self.answer(q, req.temperature, &mut rng)?;
                let confidence = self.profile.verbalize(&q.id, &mut rng)?;
                Ok(single_response(answer, confidence).raw_text)
            }
            Task::Comparison => {
                let (q1, q2) = (self.question(&ids[0])?, self.question(&ids[1])?);
                let a1 = self.answer(q1, req.temperature, &mut rng)?;
                let a2 = self.answer(q2, req.temperature, &mut rng)?;
                let choice = self.choose(&q1.id, &q2.id, &mut rng)?;
                Ok(serde_json::json!({
                    "choice": choice.as_str(),
                    "answer_q1": a1,
                    "answer_q2": a2,
                })
                .to_string())
            }
        }
    }
}
