//! Parsing of model completions into (reasoning, answer) and normalization
//! of answers against an attribute's allowed values.
//!
//! Classification is total: malformed and off-vocabulary completions become
//! validity states rather than errors, so they stay available downstream as
//! dispreferred candidates and keep counting in confidence denominators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttributeSpec, ANSWER_CLOSE, ANSWER_OPEN, REASONING_CLOSE, REASONING_OPEN};

/// Tag extraction failed: a pair is missing or unclosed, or the answer is
/// empty after trimming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("malformed reasoning/answer tags")]
pub struct MalformedTags;

/// The answer matched no allowed value after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("answer not in allowed values")]
pub struct AnswerNotAllowed;

/// Outcome of classifying one completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    #[serde(rename = "malformed")]
    MalformedTags,
    #[serde(rename = "not_allowed")]
    AnswerNotAllowed,
}

/// One sampled reasoning-and-answer completion with its parse status.
///
/// Wire schema (`chains.jsonl`): `task_id`, `raw`, `reasoning`,
/// `answer_raw`, `answer`, `validity`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationChain {
    pub task_id: String,
    #[serde(rename = "raw")]
    pub raw_text: String,
    pub reasoning: Option<String>,
    pub answer_raw: Option<String>,
    #[serde(rename = "answer")]
    pub answer_canonical: Option<String>,
    pub validity: Validity,
}

impl GenerationChain {
    pub fn is_valid(&self) -> bool {
        self.validity == Validity::Valid
    }
}

fn extract_span<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

/// Extracts the first `<reasoning>…</reasoning>` and `<answer>…</answer>`
/// spans, trimmed. Surrounding text is tolerated; decoders emit stray
/// tokens. The answer must be non-empty after trimming.
pub fn parse_chain(raw: &str) -> Result<(String, String), MalformedTags> {
    let reasoning = extract_span(raw, REASONING_OPEN, REASONING_CLOSE).ok_or(MalformedTags)?;
    let answer = extract_span(raw, ANSWER_OPEN, ANSWER_CLOSE).ok_or(MalformedTags)?;
    let answer = answer.trim();
    if answer.is_empty() {
        return Err(MalformedTags);
    }
    Ok((reasoning.trim().to_string(), answer.to_string()))
}

/// Strict variant for corpus audits: the completion must be exactly the
/// answer-prompt template, with no text outside the tags.
pub fn parse_chain_strict(raw: &str) -> Result<(String, String), MalformedTags> {
    let rest = raw.strip_prefix(REASONING_OPEN).ok_or(MalformedTags)?;
    let close = rest.find(REASONING_CLOSE).ok_or(MalformedTags)?;
    let reasoning = &rest[..close];
    let rest = &rest[close + REASONING_CLOSE.len()..];
    let rest = rest.strip_prefix(ANSWER_OPEN).ok_or(MalformedTags)?;
    let answer = rest.strip_suffix(ANSWER_CLOSE).ok_or(MalformedTags)?;
    if answer.contains(ANSWER_CLOSE) {
        return Err(MalformedTags);
    }
    let answer = answer.trim();
    if answer.is_empty() {
        return Err(MalformedTags);
    }
    Ok((reasoning.trim().to_string(), answer.to_string()))
}

/// Matches a raw answer against the allowed values (trim, collapse internal
/// whitespace, case-fold; no fuzzy matching) and returns the canonical
/// spelling from the spec.
pub fn normalize_answer(answer_raw: &str, spec: &AttributeSpec) -> Result<String, AnswerNotAllowed> {
    spec.canonical_value(answer_raw)
        .map(str::to_owned)
        .ok_or(AnswerNotAllowed)
}

/// How completions are matched against the tag template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// First-match extraction, surrounding text tolerated.
    #[default]
    Lenient,
    /// Whole completion must be exactly the template.
    Strict,
}

/// Classifies one completion. Total: every failure becomes a validity
/// state, never an error.
pub fn classify_chain(task_id: &str, raw: &str, spec: &AttributeSpec) -> GenerationChain {
    classify_chain_with(task_id, raw, spec, ParseMode::Lenient)
}

pub fn classify_chain_with(
    task_id: &str,
    raw: &str,
    spec: &AttributeSpec,
    mode: ParseMode,
) -> GenerationChain {
    let parsed = match mode {
        ParseMode::Lenient => parse_chain(raw),
        ParseMode::Strict => parse_chain_strict(raw),
    };
    let (reasoning, answer_raw, answer_canonical, validity) = match parsed {
        Err(MalformedTags) => (None, None, None, Validity::MalformedTags),
        Ok((reasoning, answer_raw)) => match normalize_answer(&answer_raw, spec) {
            Ok(canonical) => (Some(reasoning), Some(answer_raw), Some(canonical), Validity::Valid),
            Err(AnswerNotAllowed) => {
                (Some(reasoning), Some(answer_raw), None, Validity::AnswerNotAllowed)
            }
        },
    };
    GenerationChain {
        task_id: task_id.to_string(),
        raw_text: raw.to_string(),
        reasoning,
        answer_raw,
        answer_canonical,
        validity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_answer_text, AttributeSpec};
    use proptest::prelude::*;

    fn type_spec() -> AttributeSpec {
        AttributeSpec::new(
            "suitcase",
            "type",
            "Type refers to the classification of the product based on its use and structure.",
            vec![
                "Cabin & Check-in Set".into(),
                "Check-in Suitcase".into(),
                "Cabin Suitcase".into(),
                "Overnighter & Briefcase".into(),
            ],
        )
        .unwrap()
    }

    fn locking_spec() -> AttributeSpec {
        AttributeSpec::new(
            "suitcase",
            "locking_mechanism",
            "Locking Mechanism refers to the locking mechanism of the product.",
            vec![
                "None".into(),
                "Number Lock".into(),
                "TSA Lock".into(),
                "Key Lock".into(),
                "Combination Lock".into(),
                "Smart Lock".into(),
            ],
        )
        .unwrap()
    }

    fn pattern_spec() -> AttributeSpec {
        AttributeSpec::new(
            "suitcase",
            "pattern",
            "Pattern refers to a repeated decorative sketch printed or engraved on a product.",
            [
                "Character", "Checkered", "Colorblock", "Printed", "Solid", "Striped", "Textured",
                "Abstract", "Tropical", "Geometric-Print", "Graphic-Print", "Floral-Print",
                "Polka-Print", "Animal-Print",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_check_in_suitcase_example() {
        let raw = "<reasoning>The suitcase appears to be a standard check-in suitcase based on \
                   its size and design, which is suitable for larger travel needs.</reasoning>\
                   <answer>Check-in Suitcase</answer>";
        let (reasoning, answer) = parse_chain(raw).unwrap();
        assert_eq!(
            reasoning,
            "The suitcase appears to be a standard check-in suitcase based on its size and \
             design, which is suitable for larger travel needs."
        );
        assert_eq!(answer, "Check-in Suitcase");
    }

    #[test]
    fn unclosed_tag_is_malformed() {
        assert_eq!(parse_chain("<answer>Solid"), Err(MalformedTags));
        assert_eq!(parse_chain("<reasoning>r</reasoning><answer>Solid"), Err(MalformedTags));
        assert_eq!(parse_chain("<reasoning>r<answer>A</answer>"), Err(MalformedTags));
    }

    #[test]
    fn surrounding_text_is_tolerated_and_payloads_trimmed() {
        let raw = "noise <reasoning>r</reasoning> mid <answer> A </answer> trailing";
        assert_eq!(parse_chain(raw).unwrap(), ("r".to_string(), "A".to_string()));
    }

    #[test]
    fn empty_answer_is_malformed() {
        assert_eq!(parse_chain("<reasoning>r</reasoning><answer>  </answer>"), Err(MalformedTags));
    }

    #[test]
    fn strict_mode_rejects_surrounding_text() {
        let exact = "<reasoning>r</reasoning><answer>A</answer>";
        assert_eq!(parse_chain_strict(exact).unwrap(), ("r".into(), "A".into()));
        assert_eq!(parse_chain_strict(&format!("x{exact}")), Err(MalformedTags));
        assert_eq!(parse_chain_strict(&format!("{exact}x")), Err(MalformedTags));
        assert_eq!(
            parse_chain_strict("<reasoning>r</reasoning> <answer>A</answer>"),
            Err(MalformedTags)
        );
    }

    #[test]
    fn normalization_collapses_whitespace_and_case() {
        assert_eq!(normalize_answer("combination  lock", &locking_spec()).unwrap(), "Combination Lock");
        assert_eq!(normalize_answer(" tsa lock ", &locking_spec()).unwrap(), "TSA Lock");
        assert_eq!(normalize_answer("Check-in Suitcase", &type_spec()).unwrap(), "Check-in Suitcase");
        assert_eq!(normalize_answer("Bluish", &pattern_spec()), Err(AnswerNotAllowed));
    }

    #[test]
    fn classify_fills_validity_states() {
        let spec = type_spec();
        let ok = classify_chain("t", "<reasoning>r</reasoning><answer>Cabin Suitcase</answer>", &spec);
        assert_eq!(ok.validity, Validity::Valid);
        assert_eq!(ok.answer_canonical.as_deref(), Some("Cabin Suitcase"));

        let malformed = classify_chain("t", "hello", &spec);
        assert_eq!(malformed.validity, Validity::MalformedTags);
        assert!(malformed.reasoning.is_none());
        assert!(malformed.answer_raw.is_none());

        let off = classify_chain("t", "<reasoning>r</reasoning><answer>Maybe</answer>", &spec);
        assert_eq!(off.validity, Validity::AnswerNotAllowed);
        assert_eq!(off.answer_raw.as_deref(), Some("Maybe"));
        assert!(off.answer_canonical.is_none());
    }

    #[test]
    fn chain_record_round_trips_through_json() {
        let chain = classify_chain("t", "<reasoning>r</reasoning><answer>Cabin Suitcase</answer>", &type_spec());
        let json = serde_json::to_string(&chain).unwrap();
        assert!(json.contains("\"validity\":\"valid\""));
        assert!(json.contains("\"raw\":"));
        let back: GenerationChain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);
    }

    proptest! {
        // Round trip: rendering then parsing recovers tag-free payloads
        // (answer additionally trimmed and non-blank, per the parser contract).
        #[test]
        fn render_parse_round_trip(
            reasoning in "[a-zA-Z0-9 .,]{0,40}",
            answer in "[a-zA-Z0-9][a-zA-Z0-9 .,-]{0,30}",
        ) {
            let text = build_answer_text(&reasoning, &answer).unwrap();
            let (r, a) = parse_chain(&text).unwrap();
            prop_assert_eq!(r, reasoning.trim());
            prop_assert_eq!(a, answer.trim());
            let (rs, as_) = parse_chain_strict(&text).unwrap();
            prop_assert_eq!(rs, reasoning.trim());
            prop_assert_eq!(as_, answer.trim());
        }

        // Classification is total on arbitrary input.
        #[test]
        fn classify_never_panics(raw in ".{0,200}") {
            let chain = classify_chain("t", &raw, &type_spec());
            if chain.validity == Validity::Valid {
                let canonical = chain.answer_canonical.unwrap();
                prop_assert!(type_spec().allowed_values().contains(&canonical));
            }
        }
    }
}
