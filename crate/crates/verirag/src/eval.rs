//! Scoring and aggregation: text normalization, containment-based accuracy,
//! rank aggregation, high-quality rates, reference deltas, and judge-driven
//! comparative ranking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::backend::GenerationBackend;
use crate::prompt::{EvalBindings, EvalPromptKind, TemplateSet};
use crate::synthesis::Dataset;
use crate::types::{Answer, PipelineTrace, VerificationReport};
use crate::verify::extract_json_object;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("accuracy needs at least one gold label")]
    NoGolds,
    #[error("aggregate over zero samples is undefined")]
    NoSamples,
    #[error("before/after lists differ in length: {before} vs {after}")]
    LengthMismatch { before: usize, after: usize },
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercase, strip punctuation (Unicode categories P*, which covers the
/// curly quotes common in web text), collapse whitespace runs to single
/// spaces, and trim.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if is_punctuation(c) {
            continue;
        }
        if c.is_whitespace() {
            if !out.is_empty() {
                pending_space = true;
            }
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        for lc in c.to_lowercase() {
            out.push(lc);
        }
    }
    out
}

/// True iff any gold label, after normalization, occurs as a substring of
/// the normalized prediction.
pub fn accuracy(prediction: &Answer, gold_labels: &[String]) -> Result<bool, EvalError> {
    if gold_labels.is_empty() {
        return Err(EvalError::NoGolds);
    }
    let pred = normalize_text(&prediction.text);
    Ok(gold_labels
        .iter()
        .any(|gold| pred.contains(&normalize_text(gold))))
}

/// One row of a batch-accuracy audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub correct: bool,
    pub prediction: String,
}

/// Batch accuracy plus its per-sample audit rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchAccuracy {
    pub accuracy: f64,
    pub rows: Vec<SampleScore>,
}

fn csv_field(s: &str) -> String {
    if s.contains(['"', ',', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl BatchAccuracy {
    /// Per-sample audit CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,correct,prediction\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                csv_field(&row.id),
                row.correct,
                csv_field(&row.prediction)
            );
        }
        out
    }
}

/// Join traces to dataset samples by id and average per-sample accuracy.
/// Traces without a matching sample (or samples without golds) are skipped.
pub fn batch_accuracy(traces: &[PipelineTrace], dataset: &Dataset) -> Result<BatchAccuracy, EvalError> {
    let by_id: BTreeMap<&str, &crate::types::RagSample> = dataset
        .samples()
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();
    let mut rows = Vec::new();
    for trace in traces {
        let Some(id) = trace.question_id.as_deref() else {
            continue;
        };
        let Some(sample) = by_id.get(id) else {
            continue;
        };
        let Some(golds) = sample.gold_labels.as_deref() else {
            continue;
        };
        let correct = accuracy(&trace.final_answer, golds)?;
        rows.push(SampleScore {
            id: id.to_string(),
            correct,
            prediction: trace.final_answer.text.clone(),
        });
    }
    if rows.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let accuracy = rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64;
    Ok(BatchAccuracy { accuracy, rows })
}

/// Mean rank position: Σ xᵢ / N.
pub fn rank_aggregate(ranks: &[u32]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::NoSamples);
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of reports clearing each dimension's bar: correctness,
/// citation accuracy, and truthfulness must be exactly 1, bias strictly
/// below 0.3, conciseness strictly above 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighQualityRates {
    pub correctness: f64,
    pub citation_accuracy: f64,
    pub truthfulness: f64,
    pub bias: f64,
    pub conciseness: f64,
}

pub fn high_quality_rate(reports: &[VerificationReport]) -> Result<HighQualityRates, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let n = reports.len() as f64;
    let count = |pred: &dyn Fn(&VerificationReport) -> bool| {
        reports.iter().filter(|r| pred(r)).count() as f64 / n
    };
    Ok(HighQualityRates {
        correctness: count(&|r| r.correctness == 1.0),
        citation_accuracy: count(&|r| r.citation_accuracy == 1.0),
        truthfulness: count(&|r| r.truthfulness == 1.0),
        bias: count(&|r| r.bias < 0.3),
        conciseness: count(&|r| r.conciseness > 0.5),
    })
}

/// Percentage-point change in reference correctness rate after revision:
/// (accuracy_after − accuracy_before) × 100 over paired before/after flags.
pub fn reference_delta(before: &[bool], after: &[bool]) -> Result<f64, EvalError> {
    if before.is_empty() || after.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if before.len() != after.len() {
        return Err(EvalError::LengthMismatch {
            before: before.len(),
            after: after.len(),
        });
    }
    let rate = |flags: &[bool]| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
    Ok((rate(after) - rate(before)) * 100.0)
}

/// One answer entered into a judge comparison, tagged by the system that
/// produced it. `revised_query` is needed only for the revise prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeAnswer {
    pub system: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_query: Option<String>,
}

/// One comparison case: a question, the grounding texts the prompt kinds
/// draw on, and the competing answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeCase {
    pub id: String,
    pub question: String,
    /// Rendered reference text (citation and revise prompts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Golden label text (others and revise prompts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_label: Option<String>,
    pub answers: Vec<JudgeAnswer>,
}

/// The judge's parsed verdict on one case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeCaseResult {
    pub id: String,
    /// `presented_order[i]` is the index into the case's answers of the
    /// answer shown to the judge as "answer{i+1}". Recorded so the
    /// de-biasing shuffle stays auditable.
    pub presented_order: Vec<usize>,
    pub prompt: String,
    pub raw_output: String,
    /// Criterion → system names in rank order (best first).
    pub ranks: BTreeMap<String, Vec<String>>,
}

/// A case the judge answered unusably, kept for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantinedCase {
    pub id: String,
    pub reason: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeRankingOutcome {
    pub results: Vec<JudgeCaseResult>,
    pub quarantined: Vec<QuarantinedCase>,
    /// Criterion → system → mean rank position (lower is better).
    pub mean_ranks: BTreeMap<String, BTreeMap<String, f64>>,
    /// The presentation order was randomized per case; flagged here because
    /// it is an addition over the plain comparison protocol.
    pub order_randomized: bool,
}

/// Run the comparative judge over a batch of cases: shuffle answer order
/// per case (seeded, recorded), render the chosen prompt, call the judge,
/// and parse its rank lists. Unusable judge output quarantines the case
/// rather than failing the batch.
pub fn run_judge_ranking(
    judge: &dyn GenerationBackend,
    templates: &TemplateSet,
    kind: EvalPromptKind,
    cases: &[JudgeCase],
    seed: u64,
) -> JudgeRankingOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut quarantined = Vec::new();
    for case in cases {
        let mut order: Vec<usize> = (0..case.answers.len()).collect();
        order.shuffle(&mut rng);
        match judge_one(judge, templates, kind, case, &order) {
            Ok(result) => results.push(result),
            Err((reason, raw_output)) => quarantined.push(QuarantinedCase {
                id: case.id.clone(),
                reason,
                raw_output,
            }),
        }
    }
    let mean_ranks = aggregate_ranks(&results);
    JudgeRankingOutcome {
        results,
        quarantined,
        mean_ranks,
        order_randomized: true,
    }
}

fn judge_one(
    judge: &dyn GenerationBackend,
    templates: &TemplateSet,
    kind: EvalPromptKind,
    case: &JudgeCase,
    order: &[usize],
) -> Result<JudgeCaseResult, (String, String)> {
    let mut bindings = EvalBindings {
        question: case.question.clone(),
        reference: case.reference.clone(),
        golden_label: case.golden_label.clone(),
        answers: order
            .iter()
            .map(|&i| case.answers[i].text.clone())
            .collect(),
        revised_queries: Vec::new(),
    };
    if kind == EvalPromptKind::Revise {
        for &i in order {
            if let Some(rq) = &case.answers[i].revised_query {
                bindings.revised_queries.push(rq.clone());
            }
        }
    }
    let prompt = templates
        .build_eval_prompt(kind, &bindings)
        .map_err(|e| (format!("prompt build failed: {e}"), String::new()))?;
    let raw = judge
        .generate(&crate::backend::GenerationRequest::for_prompt(prompt.clone()))
        .map_err(|e| (format!("judge call failed: {e}"), String::new()))?;
    let ranks = parse_rank_result(&raw, case, order).map_err(|reason| (reason, raw.clone()))?;
    Ok(JudgeCaseResult {
        id: case.id.clone(),
        presented_order: order.to_vec(),
        prompt,
        raw_output: raw,
        ranks,
    })
}

/// Parse the judge's `rank_result` object. Accepts both JSON arrays and the
/// Python-tuple style shown in the prompt's own format example; labels are
/// "answerN" / "Answer N" forms or bare model numbers, mapped back through
/// the presentation order to system names.
fn parse_rank_result(
    raw: &str,
    case: &JudgeCase,
    order: &[usize],
) -> Result<BTreeMap<String, Vec<String>>, String> {
    let object_text =
        extract_json_object(&tuples_to_arrays(raw)).ok_or("no JSON object in judge output")?;
    let value: serde_json::Value =
        serde_json::from_str(&object_text).map_err(|e| format!("judge JSON malformed: {e}"))?;
    let rank_result = value
        .get("rank_result")
        .ok_or("judge output lacks rank_result")?;

    let label_to_system = |label: &str| -> Option<String> {
        let digits: String = label.chars().filter(|c| c.is_ascii_digit()).collect();
        let position: usize = digits.parse().ok()?;
        let idx = *order.get(position.checked_sub(1)?)?;
        Some(case.answers.get(idx)?.system.clone())
    };

    let mut ranks = BTreeMap::new();
    match rank_result {
        // {"Correctness": [("answer4", 0.77), ...], ...}
        serde_json::Value::Object(criteria) => {
            for (criterion, entries) in criteria {
                let entries = entries
                    .as_array()
                    .ok_or_else(|| format!("criterion {criterion} is not a list"))?;
                let mut ordered = Vec::new();
                for entry in entries {
                    let label = match entry {
                        serde_json::Value::Array(pair) => pair.first().and_then(|v| v.as_str()),
                        serde_json::Value::String(s) => Some(s.as_str()),
                        _ => None,
                    }
                    .ok_or_else(|| format!("unreadable rank entry in {criterion}"))?;
                    let system = label_to_system(label)
                        .ok_or_else(|| format!("rank label {label:?} maps to no answer"))?;
                    ordered.push(system);
                }
                if ordered.is_empty() {
                    return Err(format!("criterion {criterion} ranked nothing"));
                }
                ranks.insert(criterion.clone(), ordered);
            }
        }
        // [{"model": "1", "score": 0.9}, ...]
        serde_json::Value::Array(entries) => {
            let mut ordered = Vec::new();
            for entry in entries {
                let label = entry
                    .get("model")
                    .and_then(|v| v.as_str().map(str::to_string).or_else(|| v.as_u64().map(|n| n.to_string())))
                    .ok_or("revise rank entry lacks a model label")?;
                let system = label_to_system(&label)
                    .ok_or_else(|| format!("rank label {label:?} maps to no answer"))?;
                ordered.push(system);
            }
            if ordered.is_empty() {
                return Err("empty rank_result list".into());
            }
            ranks.insert("Revision".to_string(), ordered);
        }
        _ => return Err("rank_result has an unexpected shape".into()),
    }
    Ok(ranks)
}

/// Convert Python-style tuples to JSON arrays by rewriting parentheses that
/// occur outside string literals.
fn tuples_to_arrays(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in raw.chars() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '(' => out.push('['),
            ')' => out.push(']'),
            _ => out.push(c),
        }
    }
    out
}

fn aggregate_ranks(results: &[JudgeCaseResult]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut positions: BTreeMap<String, BTreeMap<String, Vec<u32>>> = BTreeMap::new();
    for result in results {
        for (criterion, ordered) in &result.ranks {
            let per_system = positions.entry(criterion.clone()).or_default();
            for (i, system) in ordered.iter().enumerate() {
                per_system
                    .entry(system.clone())
                    .or_default()
                    .push((i + 1) as u32);
            }
        }
    }
    positions
        .into_iter()
        .map(|(criterion, per_system)| {
            let means = per_system
                .into_iter()
                .filter_map(|(system, ranks)| {
                    rank_aggregate(&ranks).ok().map(|mean| (system, mean))
                })
                .collect();
            (criterion, means)
        })
        .collect()
}
