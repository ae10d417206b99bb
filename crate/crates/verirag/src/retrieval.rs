//! Retrieval: an offline lexical retriever over a line-delimited corpus for
//! hermetic runs, and a live two-stage retriever (web search, page fetch,
//! passage extraction, re-rank) behind the same trait.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{GenerationBackend, GenerationRequest, HttpTransport};
use crate::eval::normalize_text;
use crate::types::{ReferenceSet, ScoredPassage};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("search backend unavailable: {0}")]
    SearchUnavailable(String),
    #[error("search quota exceeded (status {status})")]
    QuotaExceeded { status: u16 },
    #[error("offline retrieval over an empty corpus")]
    EmptyCorpus,
    #[error("query is empty")]
    EmptyQuery,
    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("reference construction: {0}")]
    Reference(#[from] crate::types::TypeError),
}

/// One search engine result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchHit {
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
}

/// One corpus passage; `gold_for` marks it as the known-good reference for
/// a question id, which grounds reference-correctness checks in hermetic
/// evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPassage {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_for: Option<String>,
}

/// An in-memory passage collection with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<CorpusPassage>,
    by_id: HashMap<String, usize>,
}

/// Provenance prefix for references drawn from a corpus.
const CORPUS_PROVENANCE: &str = "corpus:";

impl Corpus {
    pub fn new(passages: Vec<CorpusPassage>) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::new();
        for (i, passage) in passages.iter().enumerate() {
            if passage.text.is_empty() {
                return Err(RetrievalError::CorpusParse {
                    line: i + 1,
                    message: format!("passage {} has empty text", passage.id),
                });
            }
            if by_id.insert(passage.id.clone(), i).is_some() {
                return Err(RetrievalError::CorpusParse {
                    line: i + 1,
                    message: format!("duplicate passage id {}", passage.id),
                });
            }
        }
        Ok(Self { passages, by_id })
    }

    /// Load a line-delimited JSON corpus: `{"id":…,"text":…,"gold_for":…}`
    /// per line, blank lines skipped.
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::CorpusParse {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut passages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let passage: CorpusPassage =
                serde_json::from_str(line).map_err(|e| RetrievalError::CorpusParse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            passages.push(passage);
        }
        Self::new(passages)
    }

    pub fn passages(&self) -> &[CorpusPassage] {
        &self.passages
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Whether any reference in the set is the corpus's gold passage for
    /// the given question id (matched through corpus provenance).
    pub fn gold_hit(&self, refs: &ReferenceSet, question_id: &str) -> bool {
        refs.iter().any(|r| {
            r.source_url
                .as_deref()
                .and_then(|url| url.strip_prefix(CORPUS_PROVENANCE))
                .and_then(|id| self.by_id.get(id))
                .map(|&i| self.passages[i].gold_for.as_deref() == Some(question_id))
                .unwrap_or(false)
        })
    }
}

/// Which retrieval path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverMode {
    Live,
    Offline,
}

/// How pooled passages are re-ranked before the top-k cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    /// Deterministic token-overlap scoring. Default.
    Lexical,
    /// Scores requested from a generation backend, falling back to lexical
    /// when the reply cannot be parsed.
    BackendAssisted,
}

#[derive(Debug, Clone)]
pub struct RetrieverConfig {
    pub mode: RetrieverMode,
    pub search_endpoint: String,
    pub top_k: usize,
    pub passage_max_chars: usize,
    pub reranker: RerankerKind,
    /// Pages fetched from the search results (coarse stage width).
    pub max_pages: usize,
    /// Per-page body cap in bytes.
    pub max_body_bytes: u64,
    pub max_redirects: usize,
    pub timeout: Duration,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            mode: RetrieverMode::Offline,
            search_endpoint: String::new(),
            top_k: 5,
            passage_max_chars: 600,
            reranker: RerankerKind::Lexical,
            max_pages: 5,
            max_body_bytes: 1024 * 1024,
            max_redirects: 3,
            timeout: Duration::from_secs(20),
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=5).contains(&self.top_k) {
            return Err(format!("top_k must be in 1..=5, got {}", self.top_k));
        }
        if self.passage_max_chars == 0 {
            return Err("passage_max_chars must be positive".into());
        }
        Ok(())
    }
}

/// A retrieval result plus free-form notes (e.g. reranker fallback) that
/// callers fold into their traces.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub references: ReferenceSet,
    pub notes: Vec<String>,
}

/// A source of references for a query. Implementations must tolerate
/// concurrent calls.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str) -> Result<Retrieval, RetrievalError>;
}

fn token_set(text: &str) -> HashSet<String> {
    normalize_text(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Overlap score: |query ∩ passage| / |query| over normalized token sets.
/// Zero when the query normalizes to nothing.
pub fn lexical_score(query: &str, passage: &str) -> f64 {
    let query_tokens = token_set(query);
    if query_tokens.is_empty() {
        return 0.0;
    }
    let passage_tokens = token_set(passage);
    let hits = query_tokens
        .iter()
        .filter(|t| passage_tokens.contains(*t))
        .count();
    hits as f64 / query_tokens.len() as f64
}

/// Score and sort passages for a query: descending score, stable, ties
/// broken by earlier original position. Returns (original index, score)
/// pairs plus whether the backend-assisted path fell back to lexical.
pub fn rank_passages(
    query: &str,
    passages: &[String],
    reranker: RerankerKind,
    backend: Option<&dyn GenerationBackend>,
) -> (Vec<(usize, f64)>, bool) {
    let (scores, fallback) = match (reranker, backend) {
        (RerankerKind::Lexical, _) | (RerankerKind::BackendAssisted, None) => {
            let fallback = reranker == RerankerKind::BackendAssisted;
            (lexical_scores(query, passages), fallback)
        }
        (RerankerKind::BackendAssisted, Some(backend)) => {
            match backend_scores(query, passages, backend) {
                Some(scores) => (scores, false),
                None => (lexical_scores(query, passages), true),
            }
        }
    };
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.partial_cmp(a)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    (ranked, fallback)
}

fn lexical_scores(query: &str, passages: &[String]) -> Vec<f64> {
    passages.iter().map(|p| lexical_score(query, p)).collect()
}

/// Ask the backend for one relevance score per passage; None on any
/// protocol drift so the caller can fall back.
fn backend_scores(
    query: &str,
    passages: &[String],
    backend: &dyn GenerationBackend,
) -> Option<Vec<f64>> {
    let mut prompt = String::from(
        "Score the relevance of each passage to the query, 0 to 1. \
         Reply with JSON {\"scores\": [s1, s2, ...]} only.\n",
    );
    prompt.push_str(&format!("Query: {query}\n"));
    for (i, passage) in passages.iter().enumerate() {
        prompt.push_str(&format!("Passage [{}]: {passage}\n", i + 1));
    }
    let raw = backend.generate(&GenerationRequest::for_prompt(prompt)).ok()?;
    let object = crate::verify::extract_json_object(&raw)?;
    let value: serde_json::Value = serde_json::from_str(&object).ok()?;
    let scores = value.get("scores")?.as_array()?;
    if scores.len() != passages.len() {
        return None;
    }
    scores
        .iter()
        .map(|v| v.as_f64().map(|s| s.clamp(0.0, 1.0)))
        .collect()
}

/// Lexical retriever over an in-memory corpus. Pure and deterministic:
/// identical (query, corpus, top_k) always yields the same references.
pub struct OfflineRetriever {
    corpus: Arc<Corpus>,
    top_k: usize,
}

impl OfflineRetriever {
    pub fn new(corpus: Arc<Corpus>, top_k: usize) -> Self {
        Self {
            corpus,
            top_k: top_k.clamp(1, 5),
        }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }
}

impl Retriever for OfflineRetriever {
    fn retrieve(&self, query: &str) -> Result<Retrieval, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if self.corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let texts: Vec<String> = self
            .corpus
            .passages()
            .iter()
            .map(|p| p.text.clone())
            .collect();
        let (ranked, _) = rank_passages(query, &texts, RerankerKind::Lexical, None);
        let chosen = ranked
            .into_iter()
            .filter(|(_, score)| *score > 0.0)
            .take(self.top_k)
            .map(|(i, score)| {
                let passage = &self.corpus.passages()[i];
                ScoredPassage {
                    passage: passage.text.clone(),
                    source_url: Some(format!("{CORPUS_PROVENANCE}{}", passage.id)),
                    relevance: score,
                }
            })
            .collect();
        Ok(Retrieval {
            references: ReferenceSet::from_scored(chosen)?,
            notes: Vec::new(),
        })
    }
}

/// Split page text into paragraphs: strip tags (scripts and styles removed
/// wholesale, block-level tags become breaks), decode common entities,
/// split on blank lines, and cap each paragraph at `max_chars` characters.
pub fn extract_passages(page_text: &str, max_chars: usize) -> Vec<String> {
    let stripped = strip_tags(page_text);
    stripped
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut s: String = p.chars().take(max_chars).collect();
            if s.len() < p.len() {
                s = s.trim_end().to_string();
            }
            collapse_inline_whitespace(&s)
        })
        .collect()
}

fn collapse_inline_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_was_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            if !last_was_space && !out.is_empty() {
                out.push(' ');
            }
            last_was_space = true;
        } else {
            out.push(c);
            last_was_space = false;
        }
    }
    out.trim_end().to_string()
}

const BLOCK_TAGS: &[&str] = &[
    "p", "div", "br", "li", "ul", "ol", "h1", "h2", "h3", "h4", "h5", "h6", "tr", "table",
    "section", "article", "header", "footer", "blockquote", "pre",
];

fn strip_tags(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let bytes = html.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            // Comments pass without structural effect.
            if html[i..].starts_with("<!--") {
                i = html[i..].find("-->").map(|p| i + p + 3).unwrap_or(bytes.len());
                continue;
            }
            let close = match html[i..].find('>') {
                Some(p) => i + p,
                None => break,
            };
            let inner = &html[i + 1..close];
            let name: String = inner
                .trim_start_matches('/')
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase();
            if (name == "script" || name == "style") && !inner.starts_with('/') {
                let end_tag = format!("</{name}");
                i = match html[close..].to_ascii_lowercase().find(&end_tag) {
                    Some(p) => {
                        let after = close + p;
                        html[after..]
                            .find('>')
                            .map(|q| after + q + 1)
                            .unwrap_or(bytes.len())
                    }
                    None => bytes.len(),
                };
                continue;
            }
            if BLOCK_TAGS.contains(&name.as_str()) {
                out.push_str("\n\n");
            }
            i = close + 1;
        } else {
            let c = html[i..].chars().next().unwrap();
            out.push(c);
            i += c.len_utf8();
        }
    }
    decode_entities(&out)
}

fn decode_entities(text: &str) -> String {
    text.replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&")
}

/// Two-stage live retriever: search, fetch pages concurrently, extract
/// passages, re-rank, cut to top-k.
pub struct LiveRetriever {
    config: RetrieverConfig,
    transport: Arc<dyn HttpTransport>,
    reranker_backend: Option<Arc<dyn GenerationBackend>>,
}

impl LiveRetriever {
    pub fn new(
        config: RetrieverConfig,
        transport: Arc<dyn HttpTransport>,
        reranker_backend: Option<Arc<dyn GenerationBackend>>,
    ) -> Self {
        Self {
            config,
            transport,
            reranker_backend,
        }
    }

    /// Query the search endpoint and parse its hits (top-level array or an
    /// object with a "hits" field). Status 429 is a quota signal.
    pub fn web_search(&self, query: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        let url = reqwest::Url::parse_with_params(&self.config.search_endpoint, &[("q", query)])
            .map_err(|e| RetrievalError::SearchUnavailable(format!("bad endpoint: {e}")))?;
        let response = self
            .transport
            .get_text(
                url.as_str(),
                self.config.timeout,
                self.config.max_body_bytes,
                self.config.max_redirects,
            )
            .map_err(|f| RetrievalError::SearchUnavailable(f.message))?;
        if response.status == 429 {
            return Err(RetrievalError::QuotaExceeded {
                status: response.status,
            });
        }
        if !(200..300).contains(&response.status) {
            return Err(RetrievalError::SearchUnavailable(format!(
                "search returned status {}",
                response.status
            )));
        }
        let value: serde_json::Value = serde_json::from_str(&response.body)
            .map_err(|e| RetrievalError::SearchUnavailable(format!("bad search body: {e}")))?;
        let hits_value = match &value {
            serde_json::Value::Array(_) => &value,
            serde_json::Value::Object(map) => map
                .get("hits")
                .ok_or_else(|| RetrievalError::SearchUnavailable("no hits field".into()))?,
            _ => return Err(RetrievalError::SearchUnavailable("bad search body shape".into())),
        };
        let hits: Vec<SearchHit> = serde_json::from_value(hits_value.clone())
            .map_err(|e| RetrievalError::SearchUnavailable(format!("bad hits: {e}")))?;
        Ok(hits.into_iter().filter(|h| !h.url.is_empty()).collect())
    }

    fn fetch_pages(&self, hits: &[SearchHit]) -> Vec<Option<String>> {
        let take = hits.len().min(self.config.max_pages);
        let mut bodies: Vec<Option<String>> = vec![None; take];
        std::thread::scope(|scope| {
            for (slot, hit) in bodies.iter_mut().zip(hits.iter().take(take)) {
                let transport = Arc::clone(&self.transport);
                let config = &self.config;
                let url = hit.url.clone();
                scope.spawn(move || {
                    if let Ok(response) = transport.get_text(
                        &url,
                        config.timeout,
                        config.max_body_bytes,
                        config.max_redirects,
                    ) {
                        if (200..300).contains(&response.status) {
                            *slot = Some(response.body);
                        }
                    }
                });
            }
        });
        bodies
    }
}

impl Retriever for LiveRetriever {
    fn retrieve(&self, query: &str) -> Result<Retrieval, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let hits = self.web_search(query)?;
        let bodies = self.fetch_pages(&hits);
        // Merge in engine-rank order so the pool is deterministic for a
        // fixed set of page bodies.
        let mut pooled: Vec<(String, String)> = Vec::new();
        for (hit, body) in hits.iter().zip(bodies.iter()) {
            if let Some(body) = body {
                for passage in extract_passages(body, self.config.passage_max_chars) {
                    pooled.push((passage, hit.url.clone()));
                }
            }
        }
        let texts: Vec<String> = pooled.iter().map(|(p, _)| p.clone()).collect();
        let (ranked, fallback) = rank_passages(
            query,
            &texts,
            self.config.reranker,
            self.reranker_backend.as_deref(),
        );
        let chosen: Vec<ScoredPassage> = ranked
            .into_iter()
            .filter(|(_, score)| *score > 0.0)
            .take(self.config.top_k)
            .map(|(i, score)| ScoredPassage {
                passage: pooled[i].0.clone(),
                source_url: Some(pooled[i].1.clone()),
                relevance: score.clamp(0.0, 1.0),
            })
            .collect();
        let mut notes = Vec::new();
        if fallback {
            notes.push("reranker_fallback_lexical".to_string());
        }
        Ok(Retrieval {
            references: ReferenceSet::from_scored(chosen)?,
            notes,
        })
    }
}
