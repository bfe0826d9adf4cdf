//! Rule-based reward: a format check plus an accuracy check.
//!
//! The format a response must follow is a single think span followed by a
//! single boxed answer, with nothing but whitespace elsewhere:
//!
//! ```text
//! <think> ...anything... </think> \boxed{ANSWER}
//! ```
//!
//! Accuracy extracts the last well-formed `\boxed{...}` anywhere in the text
//! (independent of the format check, so a correct but sloppily formatted
//! answer can still earn the accuracy component in additive mode) and
//! compares it with the gold answer canonically. The two components are
//! weighted by [`RewardWeights`]; in gated mode the accuracy component only
//! counts when the format check passes.

use serde::{Deserialize, Serialize};

use crate::env::{THINK_CLOSE, THINK_OPEN};
use crate::types::{canonicalize_answer_text, Answer, AnswerSpace, RewardWeights, TaskInstance};

const BOXED_OPEN: &str = "\\boxed{";

/// True when `text` is exactly one think span followed by exactly one boxed
/// answer, with only whitespace before, between, and after.
pub fn check_format(text: &str) -> bool {
    let opens: Vec<usize> = text.match_indices(THINK_OPEN).map(|(i, _)| i).collect();
    let closes: Vec<usize> = text.match_indices(THINK_CLOSE).map(|(i, _)| i).collect();
    if opens.len() != 1 || closes.len() != 1 {
        return false;
    }
    let (open, close) = (opens[0], closes[0]);
    if close < open {
        return false;
    }
    if !text[..open].trim().is_empty() {
        return false;
    }
    let boxes: Vec<usize> = text.match_indices(BOXED_OPEN).map(|(i, _)| i).collect();
    if boxes.len() != 1 {
        return false;
    }
    let boxed_start = boxes[0];
    let after_close = close + THINK_CLOSE.len();
    if boxed_start < after_close {
        return false;
    }
    if !text[after_close..boxed_start].trim().is_empty() {
        return false;
    }
    let inner_start = boxed_start + BOXED_OPEN.len();
    match text[inner_start..].find('}') {
        Some(end) => text[inner_start + end + 1..].trim().is_empty(),
        None => false,
    }
}

/// Inner text of the last well-formed `\boxed{...}` construct, if any.
pub fn extract_boxed(text: &str) -> Option<&str> {
    let mut result = None;
    for (idx, _) in text.match_indices(BOXED_OPEN) {
        let rest = &text[idx + BOXED_OPEN.len()..];
        if let Some(end) = rest.find('}') {
            result = Some(&rest[..end]);
        }
    }
    result
}

/// Canonicalized extracted answer, or `None` when nothing parseable inside
/// the task's answer space was produced.
pub fn extract_answer(text: &str, space: &AnswerSpace) -> Option<String> {
    let raw = extract_boxed(text)?;
    let canonical = canonicalize_answer_text(raw, space.kind());
    if space.index_of(raw).is_some() {
        Some(canonical)
    } else {
        None
    }
}

/// Itemized outcome of scoring one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_ok: bool,
    /// Raw correctness of the extracted answer, before any format gating.
    pub accuracy_ok: bool,
    /// Canonical form of whatever was inside the last boxed construct, even
    /// when it falls outside the answer space; kept for diagnostics.
    pub extracted: Option<String>,
    pub total: f64,
}

/// Scores a response against the gold answer.
///
/// `total = w_format·[format] + w_accuracy·[accuracy]`, where in gated mode
/// the accuracy indicator additionally requires the format check to pass.
pub fn score(
    text: &str,
    gold: &Answer,
    space: &AnswerSpace,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let format_ok = check_format(text);
    let extracted = extract_boxed(text).map(|raw| canonicalize_answer_text(raw, space.kind()));
    let accuracy_ok = match &extracted {
        Some(value) => {
            space.index_of(value).is_some() && *value == gold.canonical_value()
        }
        None => false,
    };
    let accuracy_counts = accuracy_ok && (!weights.gate_accuracy_on_format || format_ok);
    let total = weights.w_format * f64::from(u8::from(format_ok))
        + weights.w_accuracy * f64::from(u8::from(accuracy_counts));
    RewardBreakdown {
        format_ok,
        accuracy_ok,
        extracted,
        total,
    }
}

/// [`score`] against an instance's own gold answer and answer space.
pub fn score_for_instance(
    text: &str,
    instance: &TaskInstance,
    weights: &RewardWeights,
) -> RewardBreakdown {
    score(text, &instance.answer, &instance.answer_space, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> AnswerSpace {
        AnswerSpace::Choices(vec!["A".into(), "B".into(), "C".into()])
    }

    fn gold() -> Answer {
        Answer::choice("A", vec![0, 1, 2])
    }

    fn weights() -> RewardWeights {
        RewardWeights::default()
    }

    #[test]
    fn perfect_response_earns_both_components() {
        let b = score(
            "<think> w0 w1 </think> \\boxed{A}",
            &gold(),
            &space(),
            &weights(),
        );
        assert!(b.format_ok && b.accuracy_ok);
        assert_eq!(b.extracted.as_deref(), Some("A"));
        assert!((b.total - 1.1).abs() < 1e-12);
    }

    #[test]
    fn wrong_answer_with_good_format_earns_only_the_format_component() {
        let b = score("<think> </think> \\boxed{B}", &gold(), &space(), &weights());
        assert!(b.format_ok && !b.accuracy_ok);
        assert!((b.total - 0.1).abs() < 1e-12);
    }

    #[test]
    fn out_of_space_answer_is_parsed_but_never_accurate() {
        let b = score("<think> </think> \\boxed{Z}", &gold(), &space(), &weights());
        assert!(b.format_ok);
        assert!(!b.accuracy_ok);
        assert_eq!(b.extracted.as_deref(), Some("Z"));
        assert!((b.total - 0.1).abs() < 1e-12);
        assert_eq!(extract_answer("\\boxed{Z}", &space()), None);
        assert_eq!(extract_answer("\\boxed{b}", &space()).as_deref(), Some("B"));
    }

    #[test]
    fn formatless_text_earns_nothing() {
        let b = score("w0 w1 w2", &gold(), &space(), &weights());
        assert!(!b.format_ok && !b.accuracy_ok && b.extracted.is_none());
        assert_eq!(b.total, 0.0);
        assert_eq!(score("", &gold(), &space(), &weights()).total, 0.0);
    }

    #[test]
    fn correct_answer_without_format_earns_accuracy_in_additive_mode() {
        let b = score("\\boxed{A}", &gold(), &space(), &weights());
        assert!(!b.format_ok && b.accuracy_ok);
        assert!((b.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gated_mode_withholds_accuracy_until_format_passes() {
        let gated = RewardWeights {
            gate_accuracy_on_format: true,
            ..RewardWeights::default()
        };
        let no_format = score("\\boxed{A}", &gold(), &space(), &gated);
        assert!(no_format.accuracy_ok, "raw correctness still reported");
        assert_eq!(no_format.total, 0.0);
        let both = score("<think> </think> \\boxed{A}", &gold(), &space(), &gated);
        assert!((both.total - 1.1).abs() < 1e-12);
    }

    #[test]
    fn format_check_rejects_structural_violations() {
        // Junk before the think span.
        assert!(!check_format("w0 <think> </think> \\boxed{A}"));
        // Junk between the think span and the boxed answer.
        assert!(!check_format("<think> </think> w0 \\boxed{A}"));
        // Junk after the boxed answer.
        assert!(!check_format("<think> </think> \\boxed{A} w0"));
        // Missing, doubled, or out-of-order tags.
        assert!(!check_format("\\boxed{A}"));
        assert!(!check_format("<think> <think> </think> </think> \\boxed{A}"));
        assert!(!check_format("</think> <think> \\boxed{A}"));
        // Two boxed constructs or an unterminated one.
        assert!(!check_format("<think> </think> \\boxed{A} \\boxed{B}"));
        assert!(!check_format("<think> </think> \\boxed{A"));
        // Boxed inside the think span only.
        assert!(!check_format("<think> \\boxed{A} </think>"));
        // Whitespace-only padding is fine, as is an empty think span.
        assert!(check_format("  <think>  </think>  \\boxed{A}  "));
        assert!(check_format("<think> w0 w1 w2 </think> \\boxed{0}"));
    }

    #[test]
    fn extraction_takes_the_last_wellformed_boxed_construct() {
        assert_eq!(extract_boxed("\\boxed{A} \\boxed{B}"), Some("B"));
        assert_eq!(extract_boxed("\\boxed{A} \\boxed{B"), Some("A"));
        assert_eq!(extract_boxed("no box"), None);
        let counts = AnswerSpace::ShortTexts(vec!["0".into(), "1".into(), "2".into()]);
        assert_eq!(
            extract_answer("<think> </think> \\boxed{02}", &counts).as_deref(),
            Some("2")
        );
        assert_eq!(
            extract_answer("\\boxed{ b }", &space()).as_deref(),
            Some("B")
        );
    }

    #[test]
    fn totals_respect_custom_weights() {
        let w = RewardWeights {
            w_accuracy: 2.0,
            w_format: 0.5,
            gate_accuracy_on_format: false,
        };
        let b = score("<think> </think> \\boxed{a}", &gold(), &space(), &w);
        assert!((b.total - 2.5).abs() < 1e-12);
        assert!(b.total <= w.max_total());
    }
}
