//! Bit-exact prompt construction for the three prompt families: answering,
//! verification, and comparative judging. Templates carry `{{name}}`
//! placeholders, ship as embedded defaults, and can be overridden from a
//! directory of text files (file stem = template name).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::types::{Answer, Question, ReferenceSet};

/// The QA instruction: task tag, numbered reference blocks, question, and
/// the bare answer cue.
const QA_TEMPLATE: &str =
    "#Question-Answering-in-Context-Task#{{references}}{{sep}}Question: {{question}}{{sep}}Answer:";

/// The verification instruction: criteria definitions, the inline
/// question/answer/reference object, the four examiner duties, and the
/// output-format example. Wording quirks ("details are as followed",
/// "scoring , especially", spacing inside the format example) are
/// intentional and pinned by goldens.
const VERIFICATION_TEMPLATE: &str = r#"#verification-Task#Criteria Details for answers include Correctness, Citation Accuracy, Truthfulness, Bias, Conciseness, details are as followed:
Correctness(0,1):  Evaluating whether the question is correctly answered.
Citation_Accuracy(0,1):  Evaluating whether the reference marks in the answer are accurate.
Truthfulness(0,1):  Evaluating whether the text itself violates common sense, logic or contradictions.
Bias(0,1): Assessing whether the answer deviates from that from you, not rely on the references.bias is 1 means big difference, 0 means no difference.
Conciseness(0,1): Evaluating whether the answer directly and succinctly addresses the question without unnecessary elaboration.
{"question": {{question}}, "answer": {{answer}}, "reference": {{references}}}
Now you are a reading comprehension examiner who should do things as below:
1. Score the Correctness of the reference, which would affect the Correctness of answer.
2. Score the answer based on the evaluation criteria.
3. Assess whether the answer is true, false, or unclear, according to your scoring , especially for bias.
4. If this answer is not accurately true, Revise the question to make it easier to find reference in a web search and easier to answer. Note question in the following style is easier to answer, including: using a question format, ending with a question mark(e.g., ?), and emphasizing interrogative pronouns at the end (e.g., who?)
Output format example:
{ "1": { "reference_correctness": 0.9 }, "2": { "correctness": 1,  "citation_accuracy": 0.8,  "truthfulness": 0.7, "bias": 0.8, "conciseness":0.9 }, "3": "true", "4": "" }"#;

/// Judge instruction comparing answers on citation accuracy alone.
const EVAL_CITATION_TEMPLATE: &str = r#"Criteria Details For Answers include:
Citation Accuracy(0,1):  Evaluating whether the reference marks in the answer are accurate.
{"question": {{question}}, "reference": {{reference}}, {{answers}}}
Now you are a reading comprehension examiner who should do things as below:
1. Score the answer based on the evaluation criteria.
2. Rank the scores of each answer from high to low according to each scoring criterion.
3. Briefly state the reason for your Rank.
Output format example:
{ "rank_result": {"Citation Accuracy": [("answer3", 0.77), ("answer1", 0.53), ("answer2", 0.12)]}, "rank_reason": "The reason for this ranking." }"#;

/// Judge instruction comparing answers on correctness, truthfulness, and
/// conciseness against a golden label.
const EVAL_OTHERS_TEMPLATE: &str = r#"Criteria Details For Answers include:
Correctness(0,1):  Evaluating whether the question is correctly answered, you can refer to the golden label of the question below when evaluating.
Truthfulness(0,1):  Evaluating whether the text itself violates common sense, logic or contains contradictions.
Conciseness(0,1):  Evaluating whether the answer directly and succinctly addresses the question without unnecessary elaboration.
{"question": {{question}}, "golden label": {{golden_label}}, {{answers}}}
Now you are a reading comprehension examiner who should do things as below:
1. Score the answer based on the provided evaluation criteria.
2. Rank the scores of each answer from high to low according to each scoring criterion.
3. Briefly state the reason for your Rank.
Output format example:
{ "rank_result": {"Correctness": [("answer4", 0.77), ("answer1", 0.53), ("answer3", 0.37), ("answer2", 0.12)], "Truthfulness": [("answer3", 0.92), ("answer4", 0.41), ("answer2", 0.22), ("answer1", 0.02)], "Conciseness":[("answer4", 0.69), ("answer3",  0.51), ("answer1", 0.2), ("answer2", 0.15)]}, "rank_reason": "The reason for this ranking." }"#;

/// Judge instruction ranking revised-question quality across models.
/// ("relvised" and "criterias" are the template's own wording, preserved.)
const EVAL_REVISE_TEMPLATE: &str = r#"Evaluate the appropriateness of revised questions and answers provided by four models. Assess each model's response based on its alignment with a golden answer and the necessity and quality of its revised question.
1. Assess the motivation of revision:
Firstly, Compare each model's answer to the golden answer. Then, If the answer is inaccurate and the reference is inaccurate to answer the question, proceed to evaluate the revised question. Or, it's a poor revision timing.
2. Assess the content of revision. Note assess criterias are as followed:
(1). How well it improves content retrieval.
(2). Whether it maintains the original intent and increases clarity or correctness.
Inputs:
{"Original Question": {{question}}, "Golden Label": {{golden_label}}, "Reference": {{reference}}, {{models}}}
Output Requirements:
Rank the relvised questions based on their evaluation scores(threshold value of score should be between 0 and 1), from highest to lowest. Provide an overall reason for the ranking.
Note you should only output the evaluate result, format is as followed:
{ "rank_result": [{"model": "1", "score": 0.9 }, {"model": "2", "score": 0.0 }], "rank_reason": "Overall Evaluation Reason" }"#;

/// How reference blocks (and the question/answer cues of the QA prompt)
/// are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceSeparator {
    /// The literal two-character `\\` sequence used by the source
    /// instruction tables. Default, pinned by goldens.
    #[default]
    Backslashes,
    /// One newline per block, for human-readable prompts.
    Newline,
}

impl ReferenceSeparator {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceSeparator::Backslashes => r"\\",
            ReferenceSeparator::Newline => "\n",
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot build a prompt with zero references")]
    EmptyReferences,
    #[error("cannot build a verification prompt for an empty answer")]
    EmptyAnswer,
    #[error("template placeholder {{{{{0}}}}} has no binding")]
    MissingBinding(String),
    #[error("template file {path}: {source}")]
    TemplateIo {
        path: String,
        source: std::io::Error,
    },
}

/// Which judge prompt to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPromptKind {
    Citation,
    Others,
    Revise,
}

/// Values a judge prompt is rendered from. `reference` grounds the citation
/// and revise kinds, `golden_label` the others and revise kinds;
/// `revised_queries` pair with `answers` for the revise kind only.
#[derive(Debug, Clone, Default)]
pub struct EvalBindings {
    pub question: String,
    pub reference: Option<String>,
    pub golden_label: Option<String>,
    pub answers: Vec<String>,
    pub revised_queries: Vec<String>,
}

/// The five template bodies plus the separator policy. Immutable after
/// construction; rendering is pure.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    qa: String,
    verification: String,
    eval_citation: String,
    eval_others: String,
    eval_revise: String,
    separator: ReferenceSeparator,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            qa: QA_TEMPLATE.to_string(),
            verification: VERIFICATION_TEMPLATE.to_string(),
            eval_citation: EVAL_CITATION_TEMPLATE.to_string(),
            eval_others: EVAL_OTHERS_TEMPLATE.to_string(),
            eval_revise: EVAL_REVISE_TEMPLATE.to_string(),
            separator: ReferenceSeparator::default(),
        }
    }
}

impl TemplateSet {
    pub fn with_separator(mut self, separator: ReferenceSeparator) -> Self {
        self.separator = separator;
        self
    }

    pub fn separator(&self) -> ReferenceSeparator {
        self.separator
    }

    /// Override embedded templates from a directory: any file whose stem is
    /// one of qa, verification, eval_citation, eval_others, eval_revise
    /// replaces that template (one trailing newline stripped, since editors
    /// add one). Other files are ignored; absent names keep their defaults.
    pub fn load_overrides(mut self, dir: &Path) -> Result<Self, PromptError> {
        let entries = std::fs::read_dir(dir).map_err(|source| PromptError::TemplateIo {
            path: dir.display().to_string(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| PromptError::TemplateIo {
                path: dir.display().to_string(),
                source,
            })?;
            let path = entry.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let slot = match stem {
                "qa" => &mut self.qa,
                "verification" => &mut self.verification,
                "eval_citation" => &mut self.eval_citation,
                "eval_others" => &mut self.eval_others,
                "eval_revise" => &mut self.eval_revise,
                _ => continue,
            };
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::TemplateIo {
                path: path.display().to_string(),
                source,
            })?;
            *slot = text
                .strip_suffix("\r\n")
                .or_else(|| text.strip_suffix('\n'))
                .unwrap_or(&text)
                .to_string();
        }
        Ok(self)
    }

    /// Render `Reference [i]: passage` blocks joined by the separator, no
    /// trailing separator.
    pub fn render_references(&self, refs: &ReferenceSet) -> String {
        refs.iter()
            .map(|r| format!("Reference [{}]: {}", r.index, r.passage))
            .collect::<Vec<_>>()
            .join(self.separator.as_str())
    }

    /// The answering prompt: task tag, reference blocks, question, answer cue.
    pub fn build_qa_prompt(
        &self,
        question: &Question,
        refs: &ReferenceSet,
    ) -> Result<String, PromptError> {
        if refs.is_empty() {
            return Err(PromptError::EmptyReferences);
        }
        let bindings = BTreeMap::from([
            ("references", self.render_references(refs)),
            ("question", question.text.clone()),
            ("sep", self.separator.as_str().to_string()),
        ]);
        render(&self.qa, &bindings)
    }

    /// The verification prompt over a finished (question, references,
    /// answer) tuple.
    pub fn build_verification_prompt(
        &self,
        question: &Question,
        refs: &ReferenceSet,
        answer: &Answer,
    ) -> Result<String, PromptError> {
        if refs.is_empty() {
            return Err(PromptError::EmptyReferences);
        }
        if answer.text.trim().is_empty() {
            return Err(PromptError::EmptyAnswer);
        }
        let bindings = BTreeMap::from([
            ("references", self.render_references(refs)),
            ("question", question.text.clone()),
            ("answer", answer.text.clone()),
            ("sep", self.separator.as_str().to_string()),
        ]);
        render(&self.verification, &bindings)
    }

    /// One of the three judge prompts, with answers in caller-given order.
    pub fn build_eval_prompt(
        &self,
        kind: EvalPromptKind,
        bindings: &EvalBindings,
    ) -> Result<String, PromptError> {
        if bindings.answers.is_empty() {
            return Err(PromptError::MissingBinding("answer1".into()));
        }
        let mut map = BTreeMap::from([("question", bindings.question.clone())]);
        match kind {
            EvalPromptKind::Citation => {
                let reference = bindings
                    .reference
                    .clone()
                    .ok_or_else(|| PromptError::MissingBinding("reference".into()))?;
                map.insert("reference", reference);
                map.insert("answers", numbered_answers(&bindings.answers));
            }
            EvalPromptKind::Others => {
                let label = bindings
                    .golden_label
                    .clone()
                    .ok_or_else(|| PromptError::MissingBinding("golden_label".into()))?;
                map.insert("golden_label", label);
                map.insert("answers", numbered_answers(&bindings.answers));
            }
            EvalPromptKind::Revise => {
                let label = bindings
                    .golden_label
                    .clone()
                    .ok_or_else(|| PromptError::MissingBinding("golden_label".into()))?;
                let reference = bindings
                    .reference
                    .clone()
                    .ok_or_else(|| PromptError::MissingBinding("reference".into()))?;
                map.insert("golden_label", label);
                map.insert("reference", reference);
                map.insert("models", model_blocks(bindings)?);
            }
        }
        let body = match kind {
            EvalPromptKind::Citation => &self.eval_citation,
            EvalPromptKind::Others => &self.eval_others,
            EvalPromptKind::Revise => &self.eval_revise,
        };
        render(body, &map)
    }
}

fn numbered_answers(answers: &[String]) -> String {
    answers
        .iter()
        .enumerate()
        .map(|(i, a)| format!("\"answer{}\": {}", i + 1, a))
        .collect::<Vec<_>>()
        .join(", ")
}

fn model_blocks(bindings: &EvalBindings) -> Result<String, PromptError> {
    let mut blocks = Vec::new();
    for (i, answer) in bindings.answers.iter().enumerate() {
        let revised = bindings
            .revised_queries
            .get(i)
            .ok_or_else(|| PromptError::MissingBinding(format!("revised_query{}", i + 1)))?;
        blocks.push(format!(
            "\"Model{n}\": {{\"Answer{n}\": {answer}, \"Revised Question{n}\": {revised}}}",
            n = i + 1
        ));
    }
    Ok(blocks.join(", "))
}

/// Substitute `{{name}}` placeholders in a single pass. Substituted values
/// are never re-scanned, so data containing brace pairs cannot inject
/// placeholders. A `{{…}}` whose inside is not a short identifier is
/// treated as literal text; a known-shaped placeholder without a binding
/// is an error.
fn render(body: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len() * 2);
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        if let Some(end) = after.find("}}") {
            let name = &after[..end];
            if !name.is_empty()
                && name.len() <= 32
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            {
                match bindings.get(name) {
                    Some(value) => {
                        out.push_str(value);
                        rest = &after[end + 2..];
                        continue;
                    }
                    None => return Err(PromptError::MissingBinding(name.to_string())),
                }
            }
        }
        out.push_str("{{");
        rest = after;
    }
    out.push_str(rest);
    Ok(out)
}
