//! Prompt templates for the two metacognitive task formats.

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::corpus::{AnswerFormat, Question};

pub const SINGLE_SYSTEM_PROMPT: &str =
    "When answering a question, provide the answer and a confidence score between 0 and 1 for the answer";

pub const SHORT_ANSWER_PREAMBLE: &str =
    "For the following problem, provide a short answer with just a few words.";

pub const COMPARISON_HEADER: &str =
    "Determine for which of the two following questions, your confidence score is higher";

pub const COMPARISON_QUESTION: &str =
    "Is your confidence in answering correctly higher for question Q1 or question Q2? What are the answers to Q1 and Q2?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleQuestion,
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
    pub question_ids: Vec<String>,
    /// Answer format of each question, used to constrain structured output.
    pub answer_formats: Vec<AnswerFormat>,
}

impl PromptInstance {
    pub(crate) fn check(&self) -> Result<(), GatewayError> {
        let want = match self.task {
            Task::SingleQuestion => 1,
            Task::Comparison => 2,
        };
        if self.question_ids.len() != want || self.answer_formats.len() != want {
            return Err(GatewayError::Prompt(format!(
                "{:?} prompt needs exactly {want} question(s)",
                self.task
            )));
        }
        if self.task == Task::Comparison && self.question_ids[0] == self.question_ids[1] {
            return Err(GatewayError::Prompt(format!(
                "comparison of question `{}` with itself",
                self.question_ids[0]
            )));
        }
        Ok(())
    }

    /// Stable digest of everything the model sees.
    pub fn digest(&self) -> String {
        let mut buf = String::new();
        buf.push_str(self.system_text.as_deref().unwrap_or(""));
        buf.push('\u{0}');
        buf.push_str(&self.user_text);
        crate::io::sha256_hex(buf.as_bytes())
    }
}

fn option_lines(q: &Question) -> String {
    q.options
        .iter()
        .map(|o| format!("{}: {}", o.letter, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Single-question confidence prompt for the question's format.
pub fn render_single(q: &Question) -> PromptInstance {
    let user_text = match q.format {
        AnswerFormat::MultipleChoice => format!(
            "Question: {}\nOptions:\n{}\nAnswer:\nConfidence score (0-1):",
            q.text,
            option_lines(q)
        ),
        AnswerFormat::Numeric => format!("Question: {}\nAnswer:\nConfidence score (0-1):", q.text),
        AnswerFormat::ShortAnswer => format!(
            "{SHORT_ANSWER_PREAMBLE}\nQuestion: {}\nAnswer:\nConfidence score (0-1):",
            q.text
        ),
    };
    PromptInstance {
        task: Task::SingleQuestion,
        system_text: Some(SINGLE_SYSTEM_PROMPT.to_string()),
        user_text,
        question_ids: vec![q.id.clone()],
        answer_formats: vec![q.format],
    }
}

/// Pairwise comparison prompt. Multiple-choice questions carry their option
/// lines and are separated by a blank line; free-response pairs sit on
/// consecutive lines.
pub fn render_comparison(q1: &Question, q2: &Question) -> Result<PromptInstance, GatewayError> {
    if q1.id == q2.id {
        return Err(GatewayError::Prompt(format!(
            "comparison of question `{}` with itself",
            q1.id
        )));
    }
    let block = |label: &str, q: &Question| {
        if q.options.is_empty() {
            format!("{label}: {}", q.text)
        } else {
            format!("{label}: {}\n{}", q.text, option_lines(q))
        }
    };
    let any_options = !q1.options.is_empty() || !q2.options.is_empty();
    let sep = if any_options { "\n\n" } else { "\n" };
    let user_text = format!(
        "{COMPARISON_HEADER}\n\n{}{sep}{}\n\n{COMPARISON_QUESTION}",
        block("Q1", q1),
        block("Q2", q2)
    );
    Ok(PromptInstance {
        task: Task::Comparison,
        system_text: None,
        user_text,
        question_ids: vec![q1.id.clone(), q2.id.clone()],
        answer_formats: vec![q1.format, q2.format],
    })
}

pub fn render_prompt(questions: &[&Question], task: Task) -> Result<PromptInstance, GatewayError> {
    match (task, questions) {
        (Task::SingleQuestion, [q]) => Ok(render_single(q)),
        (Task::Comparison, [q1, q2]) => render_comparison(q1, q2),
        _ => Err(GatewayError::Prompt(format!(
            "{task:?} takes {} question(s), got {}",
            if task == Task::SingleQuestion { 1 } else { 2 },
            questions.len()
        ))),
    }
}
