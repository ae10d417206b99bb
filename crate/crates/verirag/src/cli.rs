//! Command-line front door: `answer`, `eval`, and `synth` subcommands over
//! the library, with JSON error reporting and crash-safe partial outputs.
//!
//! Outputs are written to `<path>.partial` and renamed into place only when
//! a command fully succeeds, so an interrupted or failed run is always
//! distinguishable from a complete one. Failures print a single JSON object
//! to stderr and exit non-zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backend::{load_script, DenyingTransport, GenerationBackend, HttpBackend, ScriptedBackend};
use crate::config::Config;
use crate::eval::{batch_accuracy, high_quality_rate, reference_delta};
use crate::pipeline::{write_traces, Engine, RevisionMode};
use crate::retrieval::{Corpus, LiveRetriever, OfflineRetriever, Retriever, RetrieverMode};
use crate::synthesis::{
    annotate_verification, audit_annotations, augment_negative, emit_training_set, sample_rag,
    split_dataset, write_records, write_rejects, ChainMode, Dataset,
};
use crate::types::{DefectKind, Polarity, Question, RagSample, Termination};

#[derive(Parser, Debug)]
#[command(name = "verirag", version, about = "Retrieval-augmented answering with a verification loop")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Answer questions, optionally looping through verification
    Answer(AnswerArgs),
    /// Score answer traces against a labeled dataset
    Eval(EvalArgs),
    /// Synthesize multi-task training records from a seed dataset
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run without any network access: scripted backend plus offline
    /// retriever; any attempted connection is an error
    #[arg(long)]
    hermetic: bool,
    /// Scripted backend responses for hermetic runs (LDJSON)
    #[arg(long)]
    script: Option<PathBuf>,
    /// Seed fixing every random choice the command makes
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AnswerArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// One-off question text (repeatable); ids q1, q2, … are assigned
    #[arg(long)]
    question: Vec<String>,
    /// Dataset of questions to answer (LDJSON)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write full iteration traces here (LDJSON)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Single retrieve-and-generate pass, no verification loop
    #[arg(long)]
    single: bool,
    /// Worker threads for batch answering
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Revision placement
    #[arg(long, value_enum, default_value_t = AblationArg::EndRevise)]
    ablation: AblationArg,
    /// Override the configured iteration cap
    #[arg(long = "max-iters")]
    max_iters: Option<u32>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Traces produced by `answer --trace` (LDJSON)
    #[arg(long)]
    traces: PathBuf,
    /// Labeled dataset the traces are joined against (LDJSON)
    #[arg(long)]
    dataset: PathBuf,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-sample accuracy rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seed dataset to split and expand (LDJSON)
    #[arg(long)]
    input: PathBuf,
    /// Directory for train records, splits, rejects, and the audit
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Verification target shape: full report or revision only
    #[arg(long, value_enum, default_value_t = ChainArg::With)]
    chain: ChainArg,
    /// Defect kinds to manufacture, one negative per positive, cycling
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        DefectArg::Repeated,
        DefectArg::CitationSwap,
        DefectArg::RetrievalError,
    ])]
    negatives: Vec<DefectArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AblationArg {
    EndRevise,
    StartRevise,
    NoRevise,
}

impl From<AblationArg> for RevisionMode {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::EndRevise => RevisionMode::EndRevise,
            AblationArg::StartRevise => RevisionMode::StartRevise,
            AblationArg::NoRevise => RevisionMode::NoRevise,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ChainArg {
    With,
    Without,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DefectArg {
    Repeated,
    CitationSwap,
    RetrievalError,
}

impl std::fmt::Display for DefectArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind: DefectKind = (*self).into();
        f.write_str(kind.as_str())
    }
}

impl From<DefectArg> for DefectKind {
    fn from(d: DefectArg) -> Self {
        match d {
            DefectArg::Repeated => DefectKind::Repeated,
            DefectArg::CitationSwap => DefectKind::CitationSwap,
            DefectArg::RetrievalError => DefectKind::RetrievalError,
        }
    }
}

/// The stderr shape every failure reduces to.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial_output: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failed_ids: Vec<String>,
}

#[derive(Debug)]
struct CliError {
    report: ErrorReport,
}

impl CliError {
    fn new(error: &str, detail: impl std::fmt::Display) -> Self {
        Self {
            report: ErrorReport {
                error: error.to_string(),
                detail: detail.to_string(),
                partial_output: None,
                failed_ids: Vec::new(),
            },
        }
    }

    fn with_partial(mut self, path: &Path) -> Self {
        self.report.partial_output = Some(path.display().to_string());
        self
    }

    fn with_failed_ids(mut self, ids: Vec<String>) -> Self {
        self.report.failed_ids = ids;
        self
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parse argv and run. Returns the process exit code; failures have
/// already been printed as JSON to stderr.
pub fn run() -> i32 {
    let cli = Cli::parse();
    run_parsed(cli)
}

fn run_parsed(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Answer(args) => cmd_answer(&args).map(|v| serde_json::to_value(v).ok()),
        Command::Eval(args) => cmd_eval(&args).map(|v| serde_json::to_value(v).ok()),
        Command::Synth(args) => cmd_synth(&args).map(|v| serde_json::to_value(v).ok()),
    };
    match outcome {
        Ok(Some(value)) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::to_string(&e.report).expect("error report serializes")
            );
            1
        }
    }
}

/// Everything a command needs to talk to models and references.
struct Runtime {
    config: Config,
    generator: Arc<dyn GenerationBackend>,
    teacher: Arc<dyn GenerationBackend>,
    retriever: Box<dyn Retriever>,
    /// Installed in hermetic mode; a nonzero count means the guarantee
    /// was violated and the run must fail.
    deny_transport: Option<Arc<DenyingTransport>>,
}

fn load_config(common: &CommonArgs) -> CliResult<Config> {
    match &common.config {
        Some(path) => Config::load(path).map_err(|e| CliError::new("config", e)),
        None => Ok(Config::default()),
    }
}

fn build_runtime(common: &CommonArgs) -> CliResult<Runtime> {
    let config = load_config(common)?;
    if common.hermetic {
        if config.retriever.mode != RetrieverMode::Offline {
            return Err(CliError::new(
                "hermetic",
                "hermetic runs require [retriever] mode = \"offline\"",
            ));
        }
        let script_path = common.script.as_ref().ok_or_else(|| {
            CliError::new("hermetic", "hermetic runs need --script with backend responses")
        })?;
        let backend: Arc<ScriptedBackend> = Arc::new(
            load_script(script_path).map_err(|e| CliError::new("script", e))?,
        );
        let corpus = load_corpus(&config)?;
        let retriever = OfflineRetriever::new(corpus, config.retriever.top_k);
        Ok(Runtime {
            generator: Arc::clone(&backend) as Arc<dyn GenerationBackend>,
            teacher: backend,
            retriever: Box::new(retriever),
            deny_transport: Some(Arc::new(DenyingTransport::new())),
            config,
        })
    } else {
        let generator: Arc<dyn GenerationBackend> = Arc::new(
            HttpBackend::new(config.backend.to_backend_config())
                .map_err(|e| CliError::new("backend", e))?,
        );
        let teacher: Arc<dyn GenerationBackend> = if config.teacher.is_some() {
            Arc::new(
                HttpBackend::new(config.teacher_section().to_backend_config())
                    .map_err(|e| CliError::new("backend", e))?,
            )
        } else {
            Arc::clone(&generator)
        };
        let retriever: Box<dyn Retriever> = match config.retriever.mode {
            RetrieverMode::Offline => {
                let corpus = load_corpus(&config)?;
                Box::new(OfflineRetriever::new(corpus, config.retriever.top_k))
            }
            RetrieverMode::Live => {
                let transport = Arc::new(crate::backend::ReqwestTransport::new(
                    config.retriever.to_retriever_config().timeout,
                )
                .map_err(|e| CliError::new("backend", e))?);
                Box::new(LiveRetriever::new(
                    config.retriever.to_retriever_config(),
                    transport,
                    Some(Arc::clone(&generator)),
                ))
            }
        };
        Ok(Runtime {
            generator,
            teacher,
            retriever,
            deny_transport: None,
            config,
        })
    }
}

fn load_corpus(config: &Config) -> CliResult<Arc<Corpus>> {
    let path = config.retriever.corpus_path.as_ref().ok_or_else(|| {
        CliError::new("config", "[retriever] offline mode needs a corpus_path")
    })?;
    Ok(Arc::new(
        Corpus::load(path).map_err(|e| CliError::new("corpus", e))?,
    ))
}

/// Check that a hermetic run stayed hermetic.
fn assert_hermetic(runtime: &Runtime) -> CliResult<()> {
    if let Some(transport) = &runtime.deny_transport {
        let attempts = transport.attempt_count();
        if attempts > 0 {
            return Err(CliError::new(
                "hermetic",
                format!("{attempts} network attempts were made during a hermetic run"),
            ));
        }
    }
    Ok(())
}

/// Stage a final output path for crash-safe writing: the caller writes to
/// the returned `.partial` path and calls `commit` to rename it into place.
fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn commit(partial: &Path, path: &Path) -> CliResult<()> {
    std::fs::rename(partial, path)
        .map_err(|e| CliError::new("io", format!("finalizing {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct AnswerRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    question: String,
    answer: String,
    terminated_by: Termination,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct AnswerSummary {
    answered: usize,
    failed: usize,
    answers: Vec<AnswerRow>,
}

fn cmd_answer(args: &AnswerArgs) -> CliResult<AnswerSummary> {
    let runtime = build_runtime(&args.common)?;
    let mut questions: Vec<Question> = Vec::new();
    for (i, text) in args.question.iter().enumerate() {
        questions.push(
            Question::new(text.clone())
                .map_err(|e| CliError::new("input", e))?
                .with_id(format!("q{}", i + 1)),
        );
    }
    if let Some(input) = &args.input {
        let dataset = Dataset::load(input).map_err(|e| CliError::new("input", e))?;
        questions.extend(dataset.samples().iter().map(|s| s.question.clone()));
    }
    if questions.is_empty() {
        return Err(CliError::new(
            "input",
            "nothing to answer: pass --question or --input",
        ));
    }

    let mut policy = runtime.config.sigma.to_sigma_policy();
    if let Some(cap) = args.max_iters {
        policy.max_iterations = cap;
    }
    policy
        .validate()
        .map_err(|m| CliError::new("config", format!("[sigma] {m}")))?;
    let templates = runtime
        .config
        .templates
        .to_template_set()
        .map_err(|e| CliError::new("config", e))?;
    let engine = Engine {
        retriever: runtime.retriever.as_ref(),
        generator: runtime.generator.as_ref(),
        verifier: runtime.generator.as_ref(),
        templates: &templates,
        policy,
        mode: args.ablation.into(),
    };

    let results = engine.answer_batch(&questions, args.parallelism, !args.single);
    assert_hermetic(&runtime)?;

    let mut answers = Vec::new();
    let mut traces = Vec::new();
    let mut failed_ids = Vec::new();
    let mut first_error: Option<String> = None;
    for (question, result) in questions.iter().zip(results) {
        match result {
            Ok(trace) => {
                answers.push(AnswerRow {
                    id: trace.question_id.clone(),
                    question: question.text.clone(),
                    answer: trace.final_answer.text.clone(),
                    terminated_by: trace.terminated_by,
                    iterations: trace.iterations.len(),
                });
                traces.push(trace);
            }
            Err(e) => {
                failed_ids.push(question.id.clone().unwrap_or_else(|| question.text.clone()));
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }

    let mut partial_kept: Option<PathBuf> = None;
    if let Some(trace_path) = &args.trace {
        let partial = partial_path(trace_path);
        write_traces(&partial, &traces)
            .map_err(|e| CliError::new("io", e))?;
        if failed_ids.is_empty() {
            commit(&partial, trace_path)?;
        } else {
            partial_kept = Some(partial);
        }
    }

    if let Some(detail) = first_error {
        let mut err = CliError::new("answer", detail).with_failed_ids(failed_ids);
        if let Some(partial) = partial_kept {
            err = err.with_partial(&partial);
        }
        return Err(err);
    }
    Ok(AnswerSummary {
        answered: answers.len(),
        failed: 0,
        answers,
    })
}

#[derive(Debug, Serialize)]
struct EvalReport {
    samples: usize,
    accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    high_quality: Option<HighQualitySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_delta_points: Option<f64>,
    terminations: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize)]
struct HighQualitySection {
    reports: usize,
    correctness: f64,
    citation_accuracy: f64,
    truthfulness: f64,
    bias: f64,
    conciseness: f64,
}

fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let runtime = build_runtime(&args.common)?;
    let traces =
        crate::pipeline::read_traces(&args.traces).map_err(|e| CliError::new("input", e))?;
    let dataset = Dataset::load(&args.dataset).map_err(|e| CliError::new("input", e))?;

    let batch = batch_accuracy(&traces, &dataset).map_err(|e| CliError::new("eval", e))?;

    let reports: Vec<_> = traces
        .iter()
        .filter_map(|t| t.iterations.iter().rev().find_map(|it| it.report.clone()))
        .collect();
    let high_quality = high_quality_rate(&reports).ok().map(|rates| HighQualitySection {
        reports: reports.len(),
        correctness: rates.correctness,
        citation_accuracy: rates.citation_accuracy,
        truthfulness: rates.truthfulness,
        bias: rates.bias,
        conciseness: rates.conciseness,
    });

    // Reference-quality delta needs gold-passage provenance, so it is
    // only computable over an offline corpus.
    let reference_delta_points = runtime
        .config
        .retriever
        .corpus_path
        .as_ref()
        .and_then(|path| Corpus::load(path).ok())
        .and_then(|corpus| {
            let mut before = Vec::new();
            let mut after = Vec::new();
            for trace in &traces {
                let (Some(id), Some(first), Some(last)) = (
                    trace.question_id.as_deref(),
                    trace.iterations.first(),
                    trace.iterations.last(),
                ) else {
                    continue;
                };
                before.push(corpus.gold_hit(&first.references, id));
                after.push(corpus.gold_hit(&last.references, id));
            }
            reference_delta(&before, &after).ok()
        });

    let mut terminations = BTreeMap::new();
    for trace in &traces {
        let key = serde_json::to_value(trace.terminated_by)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| format!("{:?}", trace.terminated_by));
        *terminations.entry(key).or_insert(0usize) += 1;
    }

    if let Some(csv_path) = &args.csv {
        let partial = partial_path(csv_path);
        std::fs::write(&partial, batch.to_csv())
            .map_err(|e| CliError::new("io", format!("{}: {e}", partial.display())))?;
        commit(&partial, csv_path)?;
    }

    let report = EvalReport {
        samples: batch.rows.len(),
        accuracy: batch.accuracy,
        high_quality,
        reference_delta_points,
        terminations,
    };
    if let Some(out) = &args.out {
        let partial = partial_path(out);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&partial, text)
            .map_err(|e| CliError::new("io", format!("{}: {e}", partial.display())))?;
        commit(&partial, out)?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    input_samples: usize,
    first_split: usize,
    second_split: usize,
    sampled_answers: usize,
    sampling_failures: usize,
    negatives: usize,
    annotated: usize,
    rejected: usize,
    records: usize,
    rag_records: usize,
    cov_records: usize,
    audit_agreement_rate: f64,
    audit_flagged: usize,
    out_dir: String,
}

fn cmd_synth(args: &SynthArgs) -> CliResult<SynthSummary> {
    let runtime = build_runtime(&args.common)?;
    if args.negatives.is_empty() {
        return Err(CliError::new("input", "--negatives must name at least one defect kind"));
    }
    let dataset = Dataset::load(&args.input).map_err(|e| CliError::new("input", e))?;
    let templates = runtime
        .config
        .templates
        .to_template_set()
        .map_err(|e| CliError::new("config", e))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::new("io", format!("{}: {e}", args.out_dir.display())))?;

    let (d1_raw, d2_raw) =
        split_dataset(&dataset, args.common.seed).map_err(|e| CliError::new("synth", e))?;

    // Fill in answers where missing; samples that already carry one pass
    // through as positives.
    let teacher = runtime.teacher.as_ref();
    let fill = |samples: &[RagSample]| {
        let (have, need): (Vec<_>, Vec<_>) = samples
            .iter()
            .cloned()
            .partition(|s| !s.answer.text.trim().is_empty());
        let sampled = sample_rag(&need, Some(runtime.retriever.as_ref()), teacher, &templates);
        let mut kept: Vec<RagSample> = have
            .into_iter()
            .map(|mut s| {
                if s.polarity == Polarity::Unknown {
                    s.polarity = Polarity::Positive;
                }
                s
            })
            .collect();
        kept.extend(sampled.samples);
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        (kept, sampled.failures)
    };
    let (d1_samples, d1_failures) = fill(d1_raw.samples());
    let (d2_positives, d2_failures) = fill(d2_raw.samples());

    // One negative per positive, defect kinds cycling; the donor for
    // wrong-reference negatives is the next positive around the ring.
    let mut negatives = Vec::new();
    for (i, positive) in d2_positives.iter().enumerate() {
        let kind: DefectKind = args.negatives[i % args.negatives.len()].into();
        let donor = if d2_positives.len() > 1 {
            Some(&d2_positives[(i + 1) % d2_positives.len()])
        } else {
            None
        };
        let mut negative =
            match augment_negative(positive, kind, donor, args.common.seed ^ (i as u64 + 1)) {
                Ok(n) => n,
                // A positive that cannot host this defect is skipped, not fatal.
                Err(_) => continue,
            };
        negative.id = format!("{}-neg", positive.id);
        negative.question = negative.question.clone().with_id(negative.id.clone());
        negatives.push(negative);
    }

    let mut d2_all = d2_positives.clone();
    d2_all.extend(negatives.iter().cloned());
    let outcome = annotate_verification(&d2_all, teacher, &templates);
    let audit = audit_annotations(&outcome.annotated);

    let d1 = Dataset::new(format!("{}-d1", dataset.name), d1_samples)
        .map_err(|e| CliError::new("synth", e))?;
    let (records, counts) = emit_training_set(&d1, &outcome.annotated, match args.chain {
        ChainArg::With => ChainMode::With,
        ChainArg::Without => ChainMode::Without,
    }, &templates)
    .map_err(|e| CliError::new("synth", e))?;

    assert_hermetic(&runtime)?;

    // All five outputs go through partial staging; nothing is renamed into
    // place until everything has been written.
    let out = |name: &str| args.out_dir.join(name);
    let stage: Vec<(PathBuf, PathBuf)> = [
        "train.ldjson",
        "d1.ldjson",
        "d2.ldjson",
        "rejects.ldjson",
        "audit.json",
    ]
    .iter()
    .map(|name| (partial_path(&out(name)), out(name)))
    .collect();

    write_records(&stage[0].0, &records).map_err(|e| CliError::new("io", e))?;
    d1.save(&stage[1].0).map_err(|e| CliError::new("io", e))?;
    Dataset::new(format!("{}-d2", dataset.name), d2_all)
        .map_err(|e| CliError::new("synth", e))?
        .save(&stage[2].0)
        .map_err(|e| CliError::new("io", e))?;
    write_rejects(&stage[3].0, &outcome.rejected).map_err(|e| CliError::new("io", e))?;
    let audit_json = serde_json::json!({
        "auditable": audit.auditable,
        "agreements": audit.agreements,
        "agreement_rate": audit.agreement_rate,
        "judged_true_without_gold": audit.judged_true_without_gold,
        "unlabeled": audit.unlabeled,
    });
    std::fs::write(&stage[4].0, serde_json::to_string_pretty(&audit_json).expect("audit serializes"))
        .map_err(|e| CliError::new("io", format!("{}: {e}", stage[4].0.display())))?;
    for (partial, path) in &stage {
        commit(partial, path)?;
    }

    Ok(SynthSummary {
        input_samples: dataset.len(),
        first_split: d1.len(),
        second_split: d2_raw.len(),
        sampled_answers: d1.len() + d2_positives.len(),
        sampling_failures: d1_failures.len() + d2_failures.len(),
        negatives: negatives.len(),
        annotated: outcome.annotated.len(),
        rejected: outcome.rejected.len(),
        records: records.len(),
        rag_records: counts.rag_from_first_split + counts.rag_from_positives,
        cov_records: counts.cov,
        audit_agreement_rate: audit.agreement_rate,
        audit_flagged: audit.judged_true_without_gold.len(),
        out_dir: args.out_dir.display().to_string(),
    })
}
