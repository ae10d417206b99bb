//! TOML configuration covering the generator and teacher backends, the
//! retriever, the revision gate, and template overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConfig, RetryConfig};
use crate::prompt::{PromptError, ReferenceSeparator, TemplateSet};
use crate::retrieval::{RerankerKind, RetrieverConfig, RetrieverMode};
use crate::types::{SigmaMode, SigmaPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("template overrides: {0}")]
    Templates(#[from] PromptError),
}

/// One generation endpoint. Used twice: `[backend]` for the engine's own
/// generator/verifier and `[teacher]` for synthesis annotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub attempts: u32,
    pub backoff_ms: Vec<u64>,
    pub max_in_flight: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        let base = BackendConfig::default();
        Self {
            endpoint_url: base.endpoint_url,
            model_name: base.model_name,
            api_key_env: base.api_key_env,
            timeout_secs: base.timeout.as_secs(),
            attempts: base.retry.attempts,
            backoff_ms: base.retry.backoff.iter().map(|d| d.as_millis() as u64).collect(),
            max_in_flight: base.max_in_flight,
        }
    }
}

impl BackendSection {
    pub fn to_backend_config(&self) -> BackendConfig {
        BackendConfig {
            endpoint_url: self.endpoint_url.clone(),
            model_name: self.model_name.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            retry: RetryConfig {
                attempts: self.attempts,
                backoff: self.backoff_ms.iter().map(|&ms| Duration::from_millis(ms)).collect(),
            },
            max_in_flight: self.max_in_flight,
        }
    }

    fn validate(&self, section: &str) -> Result<(), ConfigError> {
        if self.endpoint_url.trim().is_empty() {
            return Err(ConfigError::Invalid(format!(
                "[{section}] endpoint_url must not be empty"
            )));
        }
        if self.attempts == 0 {
            return Err(ConfigError::Invalid(format!(
                "[{section}] attempts must be at least 1"
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid(format!(
                "[{section}] max_in_flight must be at least 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub mode: RetrieverMode,
    pub search_endpoint: String,
    pub top_k: usize,
    pub passage_max_chars: usize,
    pub reranker: RerankerKind,
    pub max_pages: usize,
    pub max_body_bytes: u64,
    pub max_redirects: usize,
    pub timeout_secs: u64,
    /// Passage corpus for offline mode.
    pub corpus_path: Option<PathBuf>,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let base = RetrieverConfig::default();
        Self {
            mode: base.mode,
            search_endpoint: base.search_endpoint,
            top_k: base.top_k,
            passage_max_chars: base.passage_max_chars,
            reranker: base.reranker,
            max_pages: base.max_pages,
            max_body_bytes: base.max_body_bytes,
            max_redirects: base.max_redirects,
            timeout_secs: base.timeout.as_secs(),
            corpus_path: None,
        }
    }
}

impl RetrieverSection {
    pub fn to_retriever_config(&self) -> RetrieverConfig {
        RetrieverConfig {
            mode: self.mode,
            search_endpoint: self.search_endpoint.clone(),
            top_k: self.top_k,
            passage_max_chars: self.passage_max_chars,
            reranker: self.reranker,
            max_pages: self.max_pages,
            max_body_bytes: self.max_body_bytes,
            max_redirects: self.max_redirects,
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.to_retriever_config()
            .validate()
            .map_err(|m| ConfigError::Invalid(format!("[retriever] {m}")))?;
        if self.mode == RetrieverMode::Live && self.search_endpoint.trim().is_empty() {
            return Err(ConfigError::Invalid(
                "[retriever] live mode needs a search_endpoint".into(),
            ));
        }
        if self.mode == RetrieverMode::Offline && self.corpus_path.is_none() {
            return Err(ConfigError::Invalid(
                "[retriever] offline mode needs a corpus_path".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaSection {
    pub mode: SigmaMode,
    pub ref_min: f64,
    pub correctness_min: f64,
    pub bias_max: f64,
    pub truthfulness_min: f64,
    pub require_judgment_false: bool,
    pub max_iterations: u32,
}

impl Default for SigmaSection {
    fn default() -> Self {
        let base = SigmaPolicy::default();
        Self {
            mode: base.mode,
            ref_min: base.ref_min,
            correctness_min: base.correctness_min,
            bias_max: base.bias_max,
            truthfulness_min: base.truthfulness_min,
            require_judgment_false: base.require_judgment_false,
            max_iterations: base.max_iterations,
        }
    }
}

impl SigmaSection {
    pub fn to_sigma_policy(&self) -> SigmaPolicy {
        SigmaPolicy {
            mode: self.mode,
            ref_min: self.ref_min,
            correctness_min: self.correctness_min,
            bias_max: self.bias_max,
            truthfulness_min: self.truthfulness_min,
            require_judgment_false: self.require_judgment_false,
            max_iterations: self.max_iterations,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.to_sigma_policy()
            .validate()
            .map_err(|m| ConfigError::Invalid(format!("[sigma] {m}")))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesSection {
    /// Directory of template overrides, one file per slot name.
    pub dir: Option<PathBuf>,
    pub separator: SeparatorChoice,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparatorChoice {
    #[default]
    Backslashes,
    Newline,
}

impl TemplatesSection {
    pub fn to_template_set(&self) -> Result<TemplateSet, ConfigError> {
        let separator = match self.separator {
            SeparatorChoice::Backslashes => ReferenceSeparator::Backslashes,
            SeparatorChoice::Newline => ReferenceSeparator::Newline,
        };
        let mut templates = TemplateSet::default().with_separator(separator);
        if let Some(dir) = &self.dir {
            templates = templates.load_overrides(dir)?;
        }
        Ok(templates)
    }
}

/// The whole configuration file. Every section has working defaults; an
/// empty file is a valid offline-ish starting point (offline mode itself
/// additionally needs a corpus_path).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSection,
    /// Teacher endpoint for synthesis; falls back to `backend` when absent.
    pub teacher: Option<BackendSection>,
    pub retriever: RetrieverSection,
    pub sigma: SigmaSection,
    pub templates: TemplatesSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.validate("backend")?;
        if let Some(teacher) = &self.teacher {
            teacher.validate("teacher")?;
        }
        self.retriever.validate()?;
        self.sigma.validate()?;
        Ok(())
    }

    /// The teacher section, falling back to the main backend.
    pub fn teacher_section(&self) -> &BackendSection {
        self.teacher.as_ref().unwrap_or(&self.backend)
    }
}
