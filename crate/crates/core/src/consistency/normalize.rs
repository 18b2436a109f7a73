use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::corpus::AnswerFormat;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("no option letter found in {0:?}")]
    NoLetter(String),
    #[error("no integer found in {0:?}")]
    NoInteger(String),
}

static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(?([A-Za-z])\)?(?:[\s.:)\]]|$)").unwrap());
static ANSWER_IS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([A-Z])\)?(?:[^A-Za-z]|$)").unwrap());
static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

/// Canonical form of an answer:
/// - multiple choice: one uppercase letter,
/// - numeric: integer without leading zeros, sign or separators beyond `-`,
/// - short answer: lowercase, trimmed, internal whitespace collapsed, trailing punctuation removed.
pub fn normalize_answer(raw: &str, format: AnswerFormat) -> Result<String, NormalizeError> {
    match format {
        AnswerFormat::MultipleChoice => letter(raw),
        AnswerFormat::Numeric => integer(raw),
        AnswerFormat::ShortAnswer => Ok(short(raw)),
    }
}

fn letter(raw: &str) -> Result<String, NormalizeError> {
    let t = raw.trim();
    let caps = LEADING_LETTER
        .captures(t)
        .or_else(|| ANSWER_IS.captures(t))
        .or_else(|| PAREN_LETTER.captures(t))
        .ok_or_else(|| NormalizeError::NoLetter(raw.to_string()))?;
    Ok(caps[1].to_ascii_uppercase())
}

fn integer(raw: &str) -> Result<String, NormalizeError> {
    let cleaned = raw.replace(',', "");
    let last = NUMBER
        .find_iter(&cleaned)
        .last()
        .ok_or_else(|| NormalizeError::NoInteger(raw.to_string()))?
        .as_str();
    let (whole, frac) = last.split_once('.').unwrap_or((last, ""));
    if frac.bytes().any(|b| b != b'0') {
        return Err(NormalizeError::NoInteger(raw.to_string()));
    }
    let value: i128 = whole
        .parse()
        .map_err(|_| NormalizeError::NoInteger(raw.to_string()))?;
    Ok(value.to_string())
}

fn short(raw: &str) -> String {
    let folded = raw.to_lowercase();
    let mut s = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    while s.ends_with(['.', ',', '!', '?', ';', ':']) {
        s.pop();
        s.truncate(s.trim_end().len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnswerFormat::*;

    #[test]
    fn multiple_choice_letters() {
        assert_eq!(normalize_answer(" e ", MultipleChoice).unwrap(), "E");
        assert_eq!(normalize_answer("(E)", MultipleChoice).unwrap(), "E");
        assert_eq!(normalize_answer("E. interference", MultipleChoice).unwrap(), "E");
        assert_eq!(normalize_answer("The answer is (E).", MultipleChoice).unwrap(), "E");
        assert!(normalize_answer("interference", MultipleChoice).is_err());
        assert!(normalize_answer("", MultipleChoice).is_err());
    }

    #[test]
    fn numeric_integers() {
        assert_eq!(normalize_answer("99.", Numeric).unwrap(), "99");
        assert_eq!(normalize_answer(" 007 ", Numeric).unwrap(), "7");
        assert_eq!(normalize_answer("$1,234", Numeric).unwrap(), "1234");
        assert_eq!(normalize_answer("99.00", Numeric).unwrap(), "99");
        assert_eq!(normalize_answer("-0", Numeric).unwrap(), "0");
        assert_eq!(normalize_answer("13 + 36 + 15 + 35 = 99", Numeric).unwrap(), "99");
        assert!(normalize_answer("99.5", Numeric).is_err());
        assert!(normalize_answer("ninety-nine", Numeric).is_err());
    }

    #[test]
    fn short_answers() {
        assert_eq!(normalize_answer("Yorkshire.", ShortAnswer).unwrap(), "yorkshire");
        assert_eq!(normalize_answer("  The   Beatles!? ", ShortAnswer).unwrap(), "the beatles");
        assert_eq!(normalize_answer("St. Paul", ShortAnswer).unwrap(), "st. paul");
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_idempotent(raw in ".{0,40}") {
            for f in [MultipleChoice, Numeric, ShortAnswer] {
                if let Ok(once) = normalize_answer(&raw, f) {
                    proptest::prop_assert_eq!(normalize_answer(&once, f).unwrap(), once);
                }
            }
        }
    }
}
