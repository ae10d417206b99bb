//! Training-data synthesis: dataset splitting, teacher-sampled answers,
//! manufactured negatives, verification annotation with quarantine, an
//! agreement audit, and multi-task record emission.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationBackend;
use crate::prompt::{PromptError, TemplateSet};
use crate::retrieval::Retriever;
use crate::types::{
    Answer, DefectKind, Judgment, Polarity, Question, RagSample, ReferenceSet, TypeError,
    VerificationReport, MAX_REFERENCES,
};
use crate::verify::{parse_verification_output, render_numbered_keying, VerifyError};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("dataset {name} has {size} samples; splitting needs at least 2")]
    DatasetTooSmall { name: String, size: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("cannot augment sample {id}: {reason}")]
    CannotSwap { id: String, reason: String },
    #[error("sample {id} cannot be emitted: {reason}")]
    UnusableSample { id: String, reason: String },
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset io: {0}")]
    Io(String),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A named collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Vec<RagSample>,
}

/// The on-disk line shape:
/// `{"id","question","references":[…],"answer","gold_labels":[…]}` with
/// polarity and defect kinds riding along for augmented data.
#[derive(Serialize, Deserialize)]
struct SampleRow {
    id: String,
    question: String,
    references: Vec<String>,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_labels: Option<Vec<String>>,
    #[serde(default = "unknown_polarity", skip_serializing_if = "is_unknown")]
    polarity: Polarity,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    defect_kinds: Vec<DefectKind>,
}

fn unknown_polarity() -> Polarity {
    Polarity::Unknown
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_unknown(p: &Polarity) -> bool {
    *p == Polarity::Unknown
}

impl SampleRow {
    fn from_sample(sample: &RagSample) -> Self {
        Self {
            id: sample.id.clone(),
            question: sample.question.text.clone(),
            references: sample
                .references
                .iter()
                .map(|r| r.passage.clone())
                .collect(),
            answer: sample.answer.text.clone(),
            gold_labels: sample.gold_labels.clone(),
            polarity: sample.polarity,
            defect_kinds: sample.defect_kinds.clone(),
        }
    }

    fn into_sample(self, line: usize) -> Result<RagSample, SynthesisError> {
        let parse = |message: String| SynthesisError::Parse { line, message };
        let question = Question::new(self.question)
            .map_err(|e| parse(format!("sample {}: {e}", self.id)))?
            .with_id(self.id.clone());
        let references = ReferenceSet::from_ranked_passages(self.references)
            .map_err(|e| parse(format!("sample {}: {e}", self.id)))?;
        let mut sample = RagSample::new(self.id, question, references, Answer::new(self.answer));
        sample.gold_labels = self.gold_labels;
        sample.polarity = self.polarity;
        sample.defect_kinds = self.defect_kinds;
        Ok(sample)
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<RagSample>) -> Result<Self, SynthesisError> {
        let mut seen = HashSet::new();
        for sample in &samples {
            if !seen.insert(sample.id.clone()) {
                return Err(SynthesisError::DuplicateId(sample.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[RagSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Load a line-delimited JSON dataset; the name is the file stem.
    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthesisError::Io(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: SampleRow = serde_json::from_str(line).map_err(|e| SynthesisError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push(row.into_sample(i + 1)?);
        }
        Self::new(name, samples)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthesisError> {
        let io_err = |e: std::io::Error| SynthesisError::Io(format!("{}: {e}", path.display()));
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        for sample in &self.samples {
            let line = serde_json::to_string(&SampleRow::from_sample(sample))
                .map_err(|e| SynthesisError::Io(e.to_string()))?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Split a dataset into two disjoint halves by seeded shuffle. The first
/// half takes the extra sample when the count is odd.
pub fn split_dataset(
    dataset: &Dataset,
    seed: u64,
) -> Result<(Dataset, Dataset), SynthesisError> {
    let n = dataset.len();
    if n < 2 {
        return Err(SynthesisError::DatasetTooSmall {
            name: dataset.name.clone(),
            size: n,
        });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let first_len = n.div_ceil(2);
    let pick = |range: &[usize]| -> Vec<RagSample> {
        range.iter().map(|&i| dataset.samples[i].clone()).collect()
    };
    let d1 = Dataset::new(format!("{}-d1", dataset.name), pick(&indices[..first_len]))?;
    let d2 = Dataset::new(format!("{}-d2", dataset.name), pick(&indices[first_len..]))?;
    Ok((d1, d2))
}

/// Outcome of answer sampling: usable samples plus per-sample failures
/// as (id, reason) pairs. A failure drops its sample; the run continues.
#[derive(Debug)]
pub struct SampledAnswers {
    pub samples: Vec<RagSample>,
    pub failures: Vec<(String, String)>,
}

/// Ask the teacher for an answer to each sample's question over its
/// references, retrieving references first for samples that have none.
pub fn sample_rag(
    samples: &[RagSample],
    retriever: Option<&dyn Retriever>,
    teacher: &dyn GenerationBackend,
    templates: &TemplateSet,
) -> SampledAnswers {
    let mut out = SampledAnswers {
        samples: Vec::new(),
        failures: Vec::new(),
    };
    for sample in samples {
        match sample_one(sample, retriever, teacher, templates) {
            Ok(done) => out.samples.push(done),
            Err(reason) => out.failures.push((sample.id.clone(), reason)),
        }
    }
    out
}

fn sample_one(
    sample: &RagSample,
    retriever: Option<&dyn Retriever>,
    teacher: &dyn GenerationBackend,
    templates: &TemplateSet,
) -> Result<RagSample, String> {
    let references = if sample.references.is_empty() {
        let retriever = retriever.ok_or("sample has no references and no retriever given")?;
        let retrieval = retriever
            .retrieve(&sample.question.text)
            .map_err(|e| e.to_string())?;
        if retrieval.references.is_empty() {
            return Err("retrieval found no references".to_string());
        }
        retrieval.references
    } else {
        sample.references.clone()
    };
    let prompt = templates
        .build_qa_prompt(&sample.question, &references)
        .map_err(|e| e.to_string())?;
    let text = teacher
        .generate(&crate::backend::GenerationRequest::for_prompt(prompt))
        .map_err(|e| e.to_string())?;
    let mut done = sample.clone();
    done.references = references;
    done.answer = Answer::new(text);
    done.polarity = Polarity::Positive;
    Ok(done)
}

/// Manufacture a negative from a positive sample.
///
/// * `Repeated` repeats one answer word or short phrase 2–5 times.
/// * `CitationSwap` replaces the answer's citation set with a different
///   non-empty subset of 1..=5, leaving the prose byte-identical.
/// * `RetrievalError` swaps in `donor`'s references, or — with no donor —
///   garbles the question the way a mangled search query would read.
pub fn augment_negative(
    sample: &RagSample,
    kind: DefectKind,
    donor: Option<&RagSample>,
    seed: u64,
) -> Result<RagSample, SynthesisError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    match kind {
        DefectKind::Repeated => {
            out.answer = Answer::new(repeat_segment(&sample.answer.text, &mut rng).ok_or_else(
                || SynthesisError::CannotSwap {
                    id: sample.id.clone(),
                    reason: "answer has no repeatable content".to_string(),
                },
            )?);
        }
        DefectKind::CitationSwap => {
            out.answer = Answer::new(swap_citations(&sample.answer, &mut rng).map_err(
                |reason| SynthesisError::CannotSwap {
                    id: sample.id.clone(),
                    reason,
                },
            )?);
        }
        DefectKind::RetrievalError => match donor {
            Some(donor) => {
                if donor.id == sample.id {
                    return Err(SynthesisError::CannotSwap {
                        id: sample.id.clone(),
                        reason: "donor is the sample itself".to_string(),
                    });
                }
                if donor.references.is_empty() {
                    return Err(SynthesisError::CannotSwap {
                        id: sample.id.clone(),
                        reason: format!("donor {} has no references", donor.id),
                    });
                }
                out.references = donor.references.clone();
            }
            None => {
                let garbled = garble_text(&sample.question.text, &mut rng);
                out.question = Question::new(garbled)
                    .map_err(|e| SynthesisError::CannotSwap {
                        id: sample.id.clone(),
                        reason: format!("garbling produced an invalid question: {e}"),
                    })?
                    .with_id(sample.question.id.clone().unwrap_or_else(|| sample.id.clone()));
            }
        },
    }
    let mut kinds = out.defect_kinds.clone();
    if !kinds.contains(&kind) {
        kinds.push(kind);
    }
    Ok(out.mark_negative(kinds)?)
}

/// Repeat one word or 2–3-word phrase 2–5 times, e.g. "respectfully" →
/// "respectfully respectfully respectfully". Words carrying citation
/// markers are avoided so the citation set is untouched.
fn repeat_segment(text: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let candidates: Vec<usize> = (0..words.len())
        .filter(|&i| !words[i].contains('['))
        .collect();
    let start = if candidates.is_empty() {
        rng.random_range(0..words.len())
    } else {
        candidates[rng.random_range(0..candidates.len())]
    };
    let max_phrase = (words.len() - start).min(3);
    let phrase_len = rng.random_range(1..=max_phrase);
    let times = rng.random_range(2..=5usize);
    let phrase = words[start..start + phrase_len].join(" ");
    let mut rebuilt: Vec<String> = words[..start].iter().map(|w| w.to_string()).collect();
    for _ in 0..times {
        rebuilt.push(phrase.clone());
    }
    rebuilt.extend(words[start + phrase_len..].iter().map(|w| w.to_string()));
    Some(rebuilt.join(" "))
}

/// Rewrite the answer's citation markers onto a different non-empty subset
/// of 1..=5 by rank: i-th smallest old number becomes i-th smallest new.
/// When the answer already cites all five, a four-element subset is used
/// and the two largest old numbers collapse onto the largest new one.
fn swap_citations(answer: &Answer, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let old: Vec<u8> = answer
        .citations
        .iter()
        .copied()
        .filter(|&c| c as usize <= MAX_REFERENCES)
        .collect();
    if old.is_empty() {
        return Err("answer cites no references".to_string());
    }
    let universe: Vec<u8> = (1..=MAX_REFERENCES as u8).collect();
    let target_size = if old.len() == universe.len() {
        old.len() - 1
    } else {
        old.len()
    };
    let new = loop {
        let mut pool = universe.clone();
        pool.shuffle(rng);
        let mut subset: Vec<u8> = pool.into_iter().take(target_size).collect();
        subset.sort_unstable();
        if subset != old {
            break subset;
        }
    };
    let map: std::collections::BTreeMap<u8, u8> = old
        .iter()
        .enumerate()
        .map(|(i, &o)| (o, new[i.min(new.len() - 1)]))
        .collect();

    let mut out = String::with_capacity(answer.text.len());
    let bytes = answer.text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b']' {
                if let Ok(value) = answer.text[i + 1..j].parse::<u8>() {
                    if let Some(&mapped) = map.get(&value) {
                        out.push_str(&format!("[{mapped}]"));
                        i = j + 1;
                        continue;
                    }
                }
            }
        }
        let c = answer.text[i..].chars().next().expect("in-bounds index");
        out.push(c);
        i += c.len_utf8();
    }
    Ok(out)
}

/// Corrupt question text the way a fat-fingered search query reads: inner
/// characters dropped or swapped, occasional word joins. Never returns the
/// input unchanged.
fn garble_text(text: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for word in &words {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() >= 4 && rng.random_bool(0.5) {
            out.push(mangle_word(&chars, rng));
        } else {
            out.push(word.to_string());
        }
    }
    // Occasionally fuse neighbours ("soda water" → "sodawater").
    if out.len() >= 2 && rng.random_bool(0.4) {
        let at = rng.random_range(0..out.len() - 1);
        let fused = format!("{}{}", out[at], out[at + 1]);
        out.splice(at..=at + 1, [fused]);
    }
    let garbled = out.join(" ");
    if garbled != text {
        return garbled;
    }
    // Nothing fired: force a visible corruption.
    let mut words = words;
    if words.len() >= 2 {
        let fused = format!("{}{}", words[0], words[1]);
        words.splice(0..=1, [fused.as_str()]);
        words.join(" ")
    } else {
        format!("{text}{}", text.chars().last().unwrap_or('x'))
    }
}

fn mangle_word(chars: &[char], rng: &mut ChaCha8Rng) -> String {
    let mut chars = chars.to_vec();
    let inner = 1..chars.len() - 1;
    match rng.random_range(0..3u8) {
        0 => {
            let at = rng.random_range(inner);
            chars.remove(at);
        }
        1 => {
            let at = rng.random_range(1..chars.len() - 2);
            chars.swap(at, at + 1);
        }
        _ => {
            let at = rng.random_range(inner);
            let c = chars[at];
            chars.insert(at, c);
        }
    }
    chars.into_iter().collect()
}

/// A sample the teacher produced a readable report for.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub sample: RagSample,
    pub report: VerificationReport,
    pub raw: String,
    pub clamped: bool,
}

/// A sample quarantined during annotation, mirroring its input plus the
/// reason it was set aside.
#[derive(Debug, Clone)]
pub struct RejectedSample {
    pub sample: RagSample,
    pub reason: String,
    pub raw: Option<String>,
}

#[derive(Debug, Default)]
pub struct AnnotationOutcome {
    pub annotated: Vec<AnnotatedSample>,
    pub rejected: Vec<RejectedSample>,
}

/// Run the teacher's verification pass over each sample. Unreadable
/// replies (and samples the prompt cannot even be built for) land in the
/// reject pile; the run always continues.
pub fn annotate_verification(
    samples: &[RagSample],
    teacher: &dyn GenerationBackend,
    templates: &TemplateSet,
) -> AnnotationOutcome {
    let mut outcome = AnnotationOutcome::default();
    for sample in samples {
        let prompt = match templates.build_verification_prompt(
            &sample.question,
            &sample.references,
            &sample.answer,
        ) {
            Ok(p) => p,
            Err(e) => {
                outcome.rejected.push(RejectedSample {
                    sample: sample.clone(),
                    reason: format!("prompt build failed: {e}"),
                    raw: None,
                });
                continue;
            }
        };
        let raw = match teacher.generate(&crate::backend::GenerationRequest::for_prompt(prompt)) {
            Ok(raw) => raw,
            Err(e) => {
                outcome.rejected.push(RejectedSample {
                    sample: sample.clone(),
                    reason: format!("teacher call failed: {e}"),
                    raw: None,
                });
                continue;
            }
        };
        match parse_verification_output(&raw) {
            Ok(parsed) => outcome.annotated.push(AnnotatedSample {
                sample: sample.clone(),
                report: parsed.report,
                raw,
                clamped: parsed.clamped,
            }),
            Err(VerifyError::UnparsableReport { raw }) => outcome.rejected.push(RejectedSample {
                sample: sample.clone(),
                reason: "verification output unparsable".to_string(),
                raw: Some(raw),
            }),
        }
    }
    outcome
}

/// Write quarantined samples as LDJSON rows mirroring the dataset schema
/// plus a "reason" field (and the raw reply when there was one).
pub fn write_rejects(path: &Path, rejected: &[RejectedSample]) -> Result<(), SynthesisError> {
    let io_err = |e: std::io::Error| SynthesisError::Io(format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for reject in rejected {
        let mut row = serde_json::to_value(SampleRow::from_sample(&reject.sample))
            .map_err(|e| SynthesisError::Io(e.to_string()))?;
        let map = row.as_object_mut().expect("sample rows are objects");
        map.insert(
            "reason".to_string(),
            serde_json::Value::String(reject.reason.clone()),
        );
        if let Some(raw) = &reject.raw {
            map.insert("raw".to_string(), serde_json::Value::String(raw.clone()));
        }
        writeln!(out, "{row}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// How teacher judgments line up with gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// Samples with gold labels, i.e. the ones agreement is defined over.
    pub auditable: usize,
    /// Samples where judgment=true coincided with a gold label present in
    /// the answer (or judgment≠true with it absent).
    pub agreements: usize,
    pub agreement_rate: f64,
    /// Samples judged true whose answer contains no gold label — the
    /// annotations most worth a human look.
    pub judged_true_without_gold: Vec<String>,
    /// Samples with no gold labels at all (not auditable).
    pub unlabeled: usize,
}

/// Compare each annotation's judgment against gold-label containment.
pub fn audit_annotations(annotated: &[AnnotatedSample]) -> AuditReport {
    let mut report = AuditReport {
        auditable: 0,
        agreements: 0,
        agreement_rate: 0.0,
        judged_true_without_gold: Vec::new(),
        unlabeled: 0,
    };
    for a in annotated {
        let Some(golds) = a.sample.gold_labels.as_ref().filter(|g| !g.is_empty()) else {
            report.unlabeled += 1;
            continue;
        };
        let gold_present = crate::eval::accuracy(&a.sample.answer, golds).unwrap_or(false);
        let judged_true = a.report.judgment == Judgment::True;
        report.auditable += 1;
        if judged_true == gold_present {
            report.agreements += 1;
        }
        if judged_true && !gold_present {
            report.judged_true_without_gold.push(a.sample.id.clone());
        }
    }
    if report.auditable > 0 {
        report.agreement_rate = report.agreements as f64 / report.auditable as f64;
    }
    report
}

/// Whether verification targets carry the full report or only the revised
/// query (the chain-ablated variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChainMode {
    #[default]
    With,
    Without,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Rag,
    Cov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub sample_id: String,
    pub split: String,
}

/// One supervised example: `{"task","input","target","meta"}` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: TaskKind,
    pub input: String,
    pub target: String,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmissionCounts {
    /// Answer-task records from the first split.
    pub rag_from_first_split: usize,
    /// Verification-task records from annotated samples.
    pub cov: usize,
    /// Extra answer-task records from annotated positives.
    pub rag_from_positives: usize,
}

impl EmissionCounts {
    pub fn total(&self) -> usize {
        self.rag_from_first_split + self.cov + self.rag_from_positives
    }
}

/// Emit the multi-task training set: every first-split sample becomes an
/// answer record, every annotated sample a verification record (annotated
/// positives also re-emit as answer records), ordered by sample id.
pub fn emit_training_set(
    first_split: &Dataset,
    annotated: &[AnnotatedSample],
    chain: ChainMode,
    templates: &TemplateSet,
) -> Result<(Vec<TrainingRecord>, EmissionCounts), SynthesisError> {
    let mut records = Vec::new();
    let mut counts = EmissionCounts::default();

    for sample in first_split.samples() {
        records.push(rag_record(sample, "d1", templates)?);
        counts.rag_from_first_split += 1;
    }
    for a in annotated {
        let input = templates.build_verification_prompt(
            &a.sample.question,
            &a.sample.references,
            &a.sample.answer,
        )?;
        let target = match chain {
            ChainMode::With => render_numbered_keying(&a.report),
            ChainMode::Without => a.report.revised_query.clone(),
        };
        records.push(TrainingRecord {
            task: TaskKind::Cov,
            input,
            target,
            meta: RecordMeta {
                sample_id: a.sample.id.clone(),
                split: "d2".to_string(),
            },
        });
        counts.cov += 1;
        if a.sample.polarity == Polarity::Positive {
            records.push(rag_record(&a.sample, "d2", templates)?);
            counts.rag_from_positives += 1;
        }
    }
    records.sort_by(|a, b| {
        (&a.meta.sample_id, task_order(a.task)).cmp(&(&b.meta.sample_id, task_order(b.task)))
    });
    Ok((records, counts))
}

fn task_order(task: TaskKind) -> u8 {
    match task {
        TaskKind::Rag => 0,
        TaskKind::Cov => 1,
    }
}

fn rag_record(
    sample: &RagSample,
    split: &str,
    templates: &TemplateSet,
) -> Result<TrainingRecord, SynthesisError> {
    if sample.answer.text.trim().is_empty() {
        return Err(SynthesisError::UnusableSample {
            id: sample.id.clone(),
            reason: "no answer to use as a target".to_string(),
        });
    }
    let input = templates.build_qa_prompt(&sample.question, &sample.references)?;
    Ok(TrainingRecord {
        task: TaskKind::Rag,
        input,
        target: sample.answer.text.clone(),
        meta: RecordMeta {
            sample_id: sample.id.clone(),
            split: split.to_string(),
        },
    })
}

/// Write training records as line-delimited JSON.
pub fn write_records(path: &Path, records: &[TrainingRecord]) -> Result<(), SynthesisError> {
    let io_err = |e: std::io::Error| SynthesisError::Io(format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line =
            serde_json::to_string(record).map_err(|e| SynthesisError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read records written by [`write_records`].
pub fn read_records(path: &Path) -> Result<Vec<TrainingRecord>, SynthesisError> {
    let file = std::fs::File::open(path)
        .map_err(|e| SynthesisError::Io(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SynthesisError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| SynthesisError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(records)
}
