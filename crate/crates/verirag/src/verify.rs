//! Verification-output handling: pull the first JSON object out of a
//! model reply, read it under either accepted keying, clamp scores, render
//! reports back out, and evaluate the revision gate.

use serde_json::Value;
use thiserror::Error;

use crate::types::{Judgment, SigmaMode, SigmaPolicy, VerificationReport};

#[derive(Debug, Error)]
pub enum VerifyError {
    /// The reply held no readable report. Carries the full raw text so a
    /// trace can preserve what the verifier actually said.
    #[error("verification output is not a readable report")]
    UnparsableReport { raw: String },
}

/// A parsed report plus whether any score had to be clamped into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerification {
    pub report: VerificationReport,
    pub clamped: bool,
}

/// Find the first balanced `{…}` region that parses as a JSON object,
/// skipping braces inside string literals. Verifiers wrap their JSON in
/// prose often enough that this is the front door for all report parsing.
pub fn extract_json_object(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            let candidate = &text[open..=close];
            if let Ok(Value::Object(_)) = serde_json::from_str::<Value>(candidate) {
                return Some(candidate.to_string());
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the brace closing the one at `open`, tracking string literals
/// and escapes. None if the text ends first.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Lookup key normalization: lowercase alphanumerics only, so
/// "Citation_Accuracy", "CitationAcc" and "citation_accuracy" meet where
/// they should and the numbered keys pass through unchanged.
fn norm_key(key: &str) -> String {
    key.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn lookup<'a>(map: &'a serde_json::Map<String, Value>, wanted: &str) -> Option<&'a Value> {
    map.iter()
        .find(|(k, _)| norm_key(k) == wanted)
        .map(|(_, v)| v)
}

/// A finite number, whether written as a JSON number or a numeric string.
fn number_in(value: &Value) -> Option<f64> {
    let n = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    n.is_finite().then_some(n)
}

fn judgment_in(value: &Value) -> Option<Judgment> {
    match value {
        Value::Bool(true) => Some(Judgment::True),
        Value::Bool(false) => Some(Judgment::False),
        Value::String(s) => Judgment::parse_token(s),
        _ => None,
    }
}

fn string_in(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

struct RawScores {
    reference_correctness: f64,
    correctness: f64,
    citation_accuracy: f64,
    truthfulness: f64,
    bias: f64,
    conciseness: f64,
    judgment: Judgment,
    revised_query: String,
}

/// Numbered keying: `{"1": {"reference_correctness": …}, "2": {…}, "3":
/// "false", "4": "…"}`. The reference score tolerates being a bare number
/// under "1".
fn read_numbered(map: &serde_json::Map<String, Value>) -> Option<RawScores> {
    let slot1 = lookup(map, "1")?;
    let reference_correctness = match slot1 {
        Value::Object(inner) => number_in(lookup(inner, "referencecorrectness")?)?,
        other => number_in(other)?,
    };
    let answer = lookup(map, "2")?.as_object()?;
    let judgment = judgment_in(lookup(map, "3")?)?;
    let revised_query = lookup(map, "4").and_then(string_in).unwrap_or_default();
    Some(RawScores {
        reference_correctness,
        correctness: number_in(lookup(answer, "correctness")?)?,
        citation_accuracy: number_in(lookup(answer, "citationaccuracy")?)?,
        truthfulness: number_in(lookup(answer, "truthfulness")?)?,
        bias: number_in(lookup(answer, "bias")?)?,
        conciseness: number_in(lookup(answer, "conciseness")?)?,
        judgment,
        revised_query,
    })
}

/// Named keying: `{"RefCorrect": …, "Answer-Score": {"Correctness": …,
/// "CitationAcc": …, …}, "Judgment": …, "RevisedQuery": …}`.
fn read_named(map: &serde_json::Map<String, Value>) -> Option<RawScores> {
    let reference_correctness = number_in(lookup(map, "refcorrect")?)?;
    let answer = lookup(map, "answerscore")?.as_object()?;
    let judgment = judgment_in(lookup(map, "judgment")?)?;
    let revised_query = lookup(map, "revisedquery")
        .and_then(string_in)
        .unwrap_or_default();
    Some(RawScores {
        reference_correctness,
        correctness: number_in(lookup(answer, "correctness")?)?,
        citation_accuracy: number_in(lookup(answer, "citationacc")?)?,
        truthfulness: number_in(lookup(answer, "truthfulness")?)?,
        bias: number_in(lookup(answer, "bias")?)?,
        conciseness: number_in(lookup(answer, "conciseness")?)?,
        judgment,
        revised_query,
    })
}

/// Parse a verifier reply into a report. Both keyings are accepted, scores
/// are clamped into [0, 1] (flagged), judgment tokens are read without case
/// sensitivity, and a missing revision slot reads as empty.
pub fn parse_verification_output(raw: &str) -> Result<ParsedVerification, VerifyError> {
    let unparsable = || VerifyError::UnparsableReport {
        raw: raw.to_string(),
    };
    let object_text = extract_json_object(raw).ok_or_else(unparsable)?;
    let value: Value = serde_json::from_str(&object_text).map_err(|_| unparsable())?;
    let map = value.as_object().ok_or_else(unparsable)?;
    let scores = read_numbered(map)
        .or_else(|| read_named(map))
        .ok_or_else(unparsable)?;

    let mut clamped = false;
    let mut clamp = |v: f64| {
        let c = v.clamp(0.0, 1.0);
        if c != v {
            clamped = true;
        }
        c
    };
    let report = VerificationReport {
        reference_correctness: clamp(scores.reference_correctness),
        correctness: clamp(scores.correctness),
        citation_accuracy: clamp(scores.citation_accuracy),
        truthfulness: clamp(scores.truthfulness),
        bias: clamp(scores.bias),
        conciseness: clamp(scores.conciseness),
        judgment: scores.judgment,
        revised_query: scores.revised_query,
    };
    Ok(ParsedVerification { report, clamped })
}

fn json_number(v: f64) -> String {
    serde_json::Number::from_f64(v)
        .map(|n| n.to_string())
        .unwrap_or_else(|| "0.0".to_string())
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Render a report in the numbered keying — the canonical on-disk form,
/// used for verification training targets and stored annotations.
pub fn render_numbered_keying(report: &VerificationReport) -> String {
    format!(
        "{{\"1\": {{\"reference_correctness\": {}}}, \"2\": {{\"correctness\": {}, \"citation_accuracy\": {}, \"truthfulness\": {}, \"bias\": {}, \"conciseness\": {}}}, \"3\": {}, \"4\": {}}}",
        json_number(report.reference_correctness),
        json_number(report.correctness),
        json_number(report.citation_accuracy),
        json_number(report.truthfulness),
        json_number(report.bias),
        json_number(report.conciseness),
        json_string(report.judgment.as_str()),
        json_string(&report.revised_query),
    )
}

/// Render a report in the named keying.
pub fn render_named_keying(report: &VerificationReport) -> String {
    format!(
        "{{\"RefCorrect\": {}, \"Answer-Score\": {{\"Correctness\": {}, \"CitationAcc\": {}, \"Truthfulness\": {}, \"Bias\": {}, \"Conciseness\": {}}}, \"Judgment\": {}, \"RevisedQuery\": {}}}",
        json_number(report.reference_correctness),
        json_number(report.correctness),
        json_number(report.citation_accuracy),
        json_number(report.truthfulness),
        json_number(report.bias),
        json_number(report.conciseness),
        json_string(report.judgment.as_str()),
        json_string(&report.revised_query),
    )
}

/// The revision gate: should the pipeline re-retrieve and regenerate?
///
/// `revise_only` fires on any non-empty revised query. `thresholded`
/// additionally requires a non-true judgment (when configured) and at least
/// one score falling past its bar — all comparisons strict, so a score
/// sitting exactly on a threshold does not fire.
pub fn sigma(report: &VerificationReport, policy: &SigmaPolicy) -> bool {
    let revision_nonempty = !report.revised_query.trim().is_empty();
    match policy.mode {
        SigmaMode::ReviseOnly => revision_nonempty,
        SigmaMode::Thresholded => {
            if !revision_nonempty {
                return false;
            }
            if policy.require_judgment_false && report.judgment == Judgment::True {
                return false;
            }
            report.reference_correctness < policy.ref_min
                || report.correctness < policy.correctness_min
                || report.bias > policy.bias_max
                || report.truthfulness < policy.truthfulness_min
        }
    }
}
