//! Core domain types shared across the engine: questions, ranked references,
//! answers with citation markers, verification reports, and the re-retrieval
//! policy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The highest reference index a reference set can hold.
pub const MAX_REFERENCES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("reference passage is empty")]
    EmptyPassage,
    #[error("reference relevance {0} outside [0,1]")]
    RelevanceOutOfRange(f64),
    #[error("reference set holds at most {MAX_REFERENCES} items, got {0}")]
    TooManyReferences(usize),
    #[error("negative sample must declare at least one defect kind")]
    NegativeWithoutDefects,
}

/// A user query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Question {
    /// Build a question, rejecting text that is empty after trimming.
    pub fn new(text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TypeError::EmptyQuestion);
        }
        Ok(Self { text, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }
}

/// One retrieved passage, numbered for citation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Citation number, 1-based and contiguous within its set.
    pub index: u8,
    pub passage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    /// Relevance to the query, in [0,1].
    pub relevance: f64,
}

/// Up to five references, sorted by relevance descending and numbered 1..n.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceSet {
    items: Vec<Reference>,
}

/// An unnumbered candidate passage, input to [`ReferenceSet::from_scored`].
#[derive(Debug, Clone)]
pub struct ScoredPassage {
    pub passage: String,
    pub source_url: Option<String>,
    pub relevance: f64,
}

impl ReferenceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build a set from scored candidates: stable-sorts by relevance
    /// descending and renumbers 1..n. Rejects more than [`MAX_REFERENCES`]
    /// candidates, empty passages, and out-of-range relevance.
    pub fn from_scored(candidates: Vec<ScoredPassage>) -> Result<Self, TypeError> {
        if candidates.len() > MAX_REFERENCES {
            return Err(TypeError::TooManyReferences(candidates.len()));
        }
        for c in &candidates {
            if c.passage.is_empty() {
                return Err(TypeError::EmptyPassage);
            }
            if !(0.0..=1.0).contains(&c.relevance) {
                return Err(TypeError::RelevanceOutOfRange(c.relevance));
            }
        }
        let mut ordered: Vec<(usize, ScoredPassage)> = candidates.into_iter().enumerate().collect();
        ordered.sort_by(|(ia, a), (ib, b)| {
            b.relevance
                .partial_cmp(&a.relevance)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        });
        let items = ordered
            .into_iter()
            .enumerate()
            .map(|(i, (_, c))| Reference {
                index: (i + 1) as u8,
                passage: c.passage,
                source_url: c.source_url,
                relevance: c.relevance,
            })
            .collect();
        Ok(Self { items })
    }

    /// Build a set from passages already in rank order, assigning descending
    /// relevance placeholders. Used when loading datasets that carry no
    /// scores.
    pub fn from_ranked_passages<I, S>(passages: I) -> Result<Self, TypeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let texts: Vec<String> = passages.into_iter().map(Into::into).collect();
        let n = texts.len();
        let scored = texts
            .into_iter()
            .enumerate()
            .map(|(i, passage)| ScoredPassage {
                passage,
                source_url: None,
                relevance: (n - i) as f64 / n.max(1) as f64,
            })
            .collect();
        Self::from_scored(scored)
    }

    pub fn items(&self) -> &[Reference] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Reference> {
        self.items.iter()
    }
}

/// A generated answer with the citation numbers recoverable from its text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: BTreeSet<u8>,
}

impl Answer {
    /// Build an answer; citations are whatever [`parse_citations`] recovers
    /// from the text, so the two never disagree.
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let citations = parse_citations(&text);
        Self { text, citations }
    }

    /// Render the citation set back into marker form, e.g. `[1][4][5]`.
    pub fn render_citation_markers(&self) -> String {
        self.citations.iter().map(|n| format!("[{n}]")).collect()
    }
}

/// Extract every citation number appearing as an ASCII `[n]` marker with
/// n in 1..=99. Malformed or empty brackets are skipped; duplicates collapse.
pub fn parse_citations(text: &str) -> BTreeSet<u8> {
    let bytes = text.as_bytes();
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b']' {
                // The digit run is ASCII, so the slice is valid UTF-8.
                if let Ok(n) = std::str::from_utf8(&bytes[i + 1..j]).unwrap().parse::<u8>() {
                    if (1..=99).contains(&n) {
                        out.insert(n);
                    }
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// The verdict on whether an answer is accurate, factual, and clear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    True,
    False,
    Unclear,
}

impl Judgment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Judgment::True => "true",
            Judgment::False => "false",
            Judgment::Unclear => "unclear",
        }
    }

    /// Case-insensitive token match.
    pub fn parse_token(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "true" => Some(Judgment::True),
            "false" => Some(Judgment::False),
            "unclear" => Some(Judgment::Unclear),
            _ => None,
        }
    }
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The parsed verification chain output: reference score, the five answer
/// scores, judgment, and the revised query (empty when no revision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub reference_correctness: f64,
    pub correctness: f64,
    pub citation_accuracy: f64,
    pub truthfulness: f64,
    pub bias: f64,
    pub conciseness: f64,
    pub judgment: Judgment,
    #[serde(default)]
    pub revised_query: String,
}

/// Which score field a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    ReferenceCorrectness,
    Correctness,
    CitationAccuracy,
    Truthfulness,
    Bias,
    Conciseness,
}

impl ScoreField {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreField::ReferenceCorrectness => "reference_correctness",
            ScoreField::Correctness => "correctness",
            ScoreField::CitationAccuracy => "citation_accuracy",
            ScoreField::Truthfulness => "truthfulness",
            ScoreField::Bias => "bias",
            ScoreField::Conciseness => "conciseness",
        }
    }
}

/// A single problem found by [`validate_report`]. Violations are data, not
/// errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportViolation {
    ScoreOutOfRange { field: ScoreField, value: f64 },
    RevisionWithTrueJudgment,
}

impl fmt::Display for ReportViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportViolation::ScoreOutOfRange { field, value } => {
                write!(f, "{} out of [0,1]: {}", field.as_str(), value)
            }
            ReportViolation::RevisionWithTrueJudgment => {
                write!(f, "judgment is true but revised query is non-empty")
            }
        }
    }
}

/// Check every score range plus the judgment/revision consistency rule.
/// An empty result means the report is valid.
pub fn validate_report(report: &VerificationReport) -> Vec<ReportViolation> {
    let mut violations = Vec::new();
    let scores = [
        (ScoreField::ReferenceCorrectness, report.reference_correctness),
        (ScoreField::Correctness, report.correctness),
        (ScoreField::CitationAccuracy, report.citation_accuracy),
        (ScoreField::Truthfulness, report.truthfulness),
        (ScoreField::Bias, report.bias),
        (ScoreField::Conciseness, report.conciseness),
    ];
    for (field, value) in scores {
        if !(0.0..=1.0).contains(&value) {
            violations.push(ReportViolation::ScoreOutOfRange { field, value });
        }
    }
    if report.judgment == Judgment::True && !report.revised_query.trim().is_empty() {
        violations.push(ReportViolation::RevisionWithTrueJudgment);
    }
    violations
}

/// Whether a sample is known-good, known-bad, or not yet labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Unknown,
}

/// The defect family a negative sample was manufactured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Repeated words or phrases in the answer.
    Repeated,
    /// Correct citations replaced by a wrong citation set.
    CitationSwap,
    /// Wrong references and/or a degraded query.
    RetrievalError,
}

impl DefectKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefectKind::Repeated => "repeated",
            DefectKind::CitationSwap => "citation_swap",
            DefectKind::RetrievalError => "retrieval_error",
        }
    }
}

/// One question/references/answer tuple with optional gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagSample {
    pub id: String,
    pub question: Question,
    pub references: ReferenceSet,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<Vec<String>>,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defect_kinds: Vec<DefectKind>,
}

impl RagSample {
    pub fn new(
        id: impl Into<String>,
        question: Question,
        references: ReferenceSet,
        answer: Answer,
    ) -> Self {
        Self {
            id: id.into(),
            question,
            references,
            answer,
            gold_labels: None,
            polarity: Polarity::Unknown,
            defect_kinds: Vec::new(),
        }
    }

    pub fn with_gold_labels(mut self, labels: Vec<String>) -> Self {
        self.gold_labels = Some(labels);
        self
    }

    /// Mark the sample negative; a negative must carry its defect kinds.
    pub fn mark_negative(mut self, kinds: Vec<DefectKind>) -> Result<Self, TypeError> {
        if kinds.is_empty() {
            return Err(TypeError::NegativeWithoutDefects);
        }
        self.polarity = Polarity::Negative;
        self.defect_kinds = kinds;
        Ok(self)
    }
}

/// How re-retrieval is gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Fire whenever the revised query is non-empty.
    ReviseOnly,
    /// Fire only when a score threshold trips as well.
    Thresholded,
}

/// Thresholds and mode governing re-retrieval. Defaults carry the
/// cross-validated values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPolicy {
    pub mode: SigmaMode,
    pub ref_min: f64,
    pub correctness_min: f64,
    pub bias_max: f64,
    pub truthfulness_min: f64,
    pub require_judgment_false: bool,
    pub max_iterations: u32,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self {
            mode: SigmaMode::Thresholded,
            ref_min: 0.27,
            correctness_min: 0.26,
            bias_max: 0.70,
            truthfulness_min: 0.92,
            require_judgment_false: true,
            max_iterations: 2,
        }
    }
}

impl SigmaPolicy {
    /// Validate threshold ranges and the iteration floor.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("ref_min", self.ref_min),
            ("correctness_min", self.correctness_min),
            ("bias_max", self.bias_max),
            ("truthfulness_min", self.truthfulness_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if self.max_iterations < 1 {
            return Err("max_iterations must be >= 1".into());
        }
        Ok(())
    }
}

/// Why a pipeline run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The verification judged the answer true.
    JudgmentOk,
    /// The re-retrieval indicator did not fire.
    SigmaFalse,
    /// The iteration budget ran out.
    IterationCap,
}

/// One retrieve/generate(/verify) round inside a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// The query sent to the retriever this round (the original question on
    /// round one, the revised query afterwards).
    pub retrieval_query: String,
    /// The question the answer was generated for; always the original.
    pub question: String,
    pub references: ReferenceSet,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<VerificationReport>,
    /// True when any parsed score had to be clamped into [0,1].
    #[serde(default)]
    pub report_clamped: bool,
    /// Raw verification text, kept when parsing failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_verification: Option<String>,
    pub sigma_fired: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// The full record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub iterations: Vec<IterationRecord>,
    pub final_answer: Answer,
    pub terminated_by: Termination,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

impl PipelineTrace {
    /// Answer generations performed (one per iteration).
    pub fn generate_calls(&self) -> usize {
        self.iterations.len()
    }

    /// Retriever calls performed (one per iteration).
    pub fn retrieve_calls(&self) -> usize {
        self.iterations.len()
    }

    /// Verification generations performed.
    pub fn verify_calls(&self) -> usize {
        self.iterations
            .iter()
            .filter(|it| it.report.is_some() || it.raw_verification.is_some())
            .count()
    }
}
