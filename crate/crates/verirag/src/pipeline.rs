//! The answer pipeline: retrieve, generate, verify, and loop under the
//! revision gate, producing replayable traces.

use std::io::{BufRead, BufWriter, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest};
use crate::prompt::{PromptError, TemplateSet};
use crate::retrieval::{RetrievalError, Retriever};
use crate::types::{
    Answer, IterationRecord, Judgment, PipelineTrace, Question, SigmaPolicy, Termination,
    TRACE_SCHEMA_VERSION,
};
use crate::verify::{parse_verification_output, sigma, VerifyError};

/// Pipeline failures, tagged with the stage that produced them.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("retrieve stage: {0}")]
    Retrieve(#[from] RetrievalError),
    #[error("retrieve stage found no references for {query:?}")]
    EmptyReferences { query: String },
    #[error("generate stage: {0}")]
    Generate(BackendError),
    #[error("verify stage: {0}")]
    Verify(BackendError),
    #[error("prompt stage: {0}")]
    Prompt(#[from] PromptError),
    #[error("trace io: {0}")]
    TraceIo(String),
}

/// When (if ever) the query may be rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RevisionMode {
    /// Verify after generating; revise and loop when the gate fires.
    #[default]
    EndRevise,
    /// Rewrite the query once before the first retrieval, then proceed as
    /// [`RevisionMode::EndRevise`]. Costs one extra generation up front.
    StartRevise,
    /// Verification still runs and is recorded, but the loop never fires.
    NoRevise,
}

/// Up-front query rewrite used by [`RevisionMode::StartRevise`].
const REWRITE_PROMPT: &str = "Rewrite the question to make it easier to find references in a web search. Reply with only the rewritten question.\nQuestion: {question}\nRewritten:";

/// An assembled answering engine. All members are borrowed so one engine
/// can be shared across batch worker threads.
pub struct Engine<'a> {
    pub retriever: &'a dyn Retriever,
    pub generator: &'a dyn GenerationBackend,
    pub verifier: &'a dyn GenerationBackend,
    pub templates: &'a TemplateSet,
    pub policy: SigmaPolicy,
    pub mode: RevisionMode,
}

impl<'a> Engine<'a> {
    /// One retrieve-and-generate pass with no verification. The trace has
    /// exactly one iteration and terminates as if the gate declined.
    pub fn answer_single(&self, question: &Question) -> Result<PipelineTrace, PipelineError> {
        let record = self.run_iteration(question, &question.text)?;
        let final_answer = record.answer.clone();
        Ok(PipelineTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: question.id.clone(),
            iterations: vec![record],
            final_answer,
            terminated_by: Termination::SigmaFalse,
        })
    }

    /// The full loop. Each round retrieves with the current query but always
    /// generates against the original question; verification then either
    /// closes the trace (good judgment, gate declined, or unreadable report)
    /// or hands the revised query to the next round, up to the iteration cap.
    pub fn answer_multi(&self, question: &Question) -> Result<PipelineTrace, PipelineError> {
        let max_iterations = self.policy.max_iterations.max(1) as usize;
        let mut iterations: Vec<IterationRecord> = Vec::new();
        let mut query = question.text.clone();

        if self.mode == RevisionMode::StartRevise {
            query = self.rewrite_query(&question.text)?;
        }

        let terminated_by = loop {
            let round = iterations.len() + 1;
            let mut record = match self.run_iteration(question, &query) {
                Ok(record) => record,
                // A revised query that retrieves nothing cannot improve on
                // the answer already in hand; keep it and stop.
                Err(PipelineError::EmptyReferences { .. }) if round > 1 => {
                    let last = iterations.last_mut().expect("round > 1");
                    last.notes.push("re_retrieval_empty".to_string());
                    break Termination::IterationCap;
                }
                Err(e) => return Err(e),
            };
            if self.mode == RevisionMode::StartRevise && round == 1 {
                record
                    .notes
                    .push(format!("start_revise_rewrite: {query}"));
            }

            // The outcome of verifying the final permitted round could not
            // be acted on, so the backend call is not spent.
            if round >= max_iterations {
                iterations.push(record);
                break Termination::IterationCap;
            }

            let raw = self.verify(question, &record)?;
            record.raw_verification = Some(raw.clone());
            let parsed = match parse_verification_output(&raw) {
                Ok(parsed) => parsed,
                Err(VerifyError::UnparsableReport { .. }) => {
                    record.notes.push("verification_unparsable".to_string());
                    iterations.push(record);
                    break Termination::SigmaFalse;
                }
            };
            record.report = Some(parsed.report.clone());
            record.report_clamped = parsed.clamped;
            record.sigma_fired = sigma(&parsed.report, &self.policy);

            let settle = |record: &IterationRecord| {
                if record
                    .report
                    .as_ref()
                    .is_some_and(|r| r.judgment == Judgment::True)
                {
                    Termination::JudgmentOk
                } else {
                    Termination::SigmaFalse
                }
            };

            if !record.sigma_fired {
                let termination = settle(&record);
                iterations.push(record);
                break termination;
            }
            if self.mode == RevisionMode::NoRevise {
                record.notes.push("revision_disabled".to_string());
                let termination = settle(&record);
                iterations.push(record);
                break termination;
            }
            let next_query = parsed.report.revised_query.trim().to_string();
            if next_query == query {
                record.notes.push("revision_fixpoint".to_string());
                let termination = settle(&record);
                iterations.push(record);
                break termination;
            }
            iterations.push(record);
            query = next_query;
        };

        let final_answer = iterations
            .last()
            .map(|it| it.answer.clone())
            .expect("loop always records at least one iteration");
        Ok(PipelineTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: question.id.clone(),
            iterations,
            final_answer,
            terminated_by,
        })
    }

    /// Retrieve for `query`, then generate against the original question.
    fn run_iteration(
        &self,
        question: &Question,
        query: &str,
    ) -> Result<IterationRecord, PipelineError> {
        let retrieval = self.retriever.retrieve(query)?;
        if retrieval.references.is_empty() {
            return Err(PipelineError::EmptyReferences {
                query: query.to_string(),
            });
        }
        let prompt = self
            .templates
            .build_qa_prompt(question, &retrieval.references)?;
        let text = self
            .generator
            .generate(&GenerationRequest::for_prompt(prompt))
            .map_err(PipelineError::Generate)?;
        Ok(IterationRecord {
            retrieval_query: query.to_string(),
            question: question.text.clone(),
            references: retrieval.references,
            answer: Answer::new(text),
            report: None,
            report_clamped: false,
            raw_verification: None,
            sigma_fired: false,
            notes: retrieval.notes,
        })
    }

    fn verify(
        &self,
        question: &Question,
        record: &IterationRecord,
    ) -> Result<String, PipelineError> {
        let prompt = self
            .templates
            .build_verification_prompt(question, &record.references, &record.answer)?;
        self.verifier
            .generate(&GenerationRequest::for_prompt(prompt))
            .map_err(PipelineError::Verify)
    }

    fn rewrite_query(&self, question: &str) -> Result<String, PipelineError> {
        let prompt = REWRITE_PROMPT.replace("{question}", question);
        let raw = self
            .generator
            .generate(&GenerationRequest::for_prompt(prompt))
            .map_err(PipelineError::Generate)?;
        let rewritten = raw.trim();
        Ok(if rewritten.is_empty() {
            question.to_string()
        } else {
            rewritten.lines().next().unwrap_or(question).to_string()
        })
    }

    /// Answer a batch across `parallelism` worker threads. Results come
    /// back slot-for-slot in input order regardless of completion order.
    pub fn answer_batch(
        &self,
        questions: &[Question],
        parallelism: usize,
        multi: bool,
    ) -> Vec<Result<PipelineTrace, PipelineError>> {
        let workers = parallelism.clamp(1, questions.len().max(1));
        let next = AtomicUsize::new(0);
        let (sender, receiver) = mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let sender = sender.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(question) = questions.get(i) else {
                        break;
                    };
                    let result = if multi {
                        self.answer_multi(question)
                    } else {
                        self.answer_single(question)
                    };
                    if sender.send((i, result)).is_err() {
                        break;
                    }
                });
            }
        });
        drop(sender);
        let mut slots: Vec<Option<Result<PipelineTrace, PipelineError>>> =
            (0..questions.len()).map(|_| None).collect();
        for (i, result) in receiver {
            slots[i] = Some(result);
        }
        slots
            .into_iter()
            .map(|slot| slot.expect("every index was dispatched exactly once"))
            .collect()
    }
}

/// Write traces as line-delimited JSON, one trace per line.
pub fn write_traces(path: &Path, traces: &[PipelineTrace]) -> Result<(), PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::TraceIo(format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for trace in traces {
        let line = serde_json::to_string(trace)
            .map_err(|e| PipelineError::TraceIo(format!("serializing trace: {e}")))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read traces written by [`write_traces`], skipping blank lines.
pub fn read_traces(path: &Path) -> Result<Vec<PipelineTrace>, PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::TraceIo(format!("{}: {e}", path.display()));
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut traces = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: PipelineTrace = serde_json::from_str(&line).map_err(|e| {
            PipelineError::TraceIo(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        traces.push(trace);
    }
    Ok(traces)
}
