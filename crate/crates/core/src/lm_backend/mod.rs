//! Language-model backends.
//!
//! A backend offers two capabilities: generating a continuation and scoring a
//! supplied continuation token by token. Every objective in [`crate::objectives`]
//! is a sum of scored log-probabilities, so any backend that reports token
//! logprobs can evaluate them. Tokenization belongs to the backend.

mod http;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, TOKEN_ENV_VAR};
pub use scripted::{split_tokens, Fallback, Matcher, Rule, RuleUse, ScriptedBackend, ScriptedSpec};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("prompt has {tokens} tokens, exceeding the context budget of {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("no scripted rule matches prompt starting `{prompt_start}`")]
    RuleMiss { prompt_start: String },
    #[error("backend does not support `{0}`")]
    Unsupported(&'static str),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
}

impl BackendError {
    /// Failures of the remote service itself, as opposed to deterministic misuse.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Status { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub generate: bool,
    pub score: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl GenerationParams {
    pub fn greedy(max_tokens: usize, stop: &[&str]) -> Self {
        Self {
            max_tokens,
            temperature: 0.0,
            stop: stop.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
}

/// Natural-log probabilities of the tokens of a continuation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogProbs {
    /// Log-probability of the whole continuation.
    pub fn sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub trait LanguageModel: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Prompt budget in backend tokens, when known.
    fn max_context(&self) -> Option<usize> {
        None
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Generation, BackendError>;

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenLogProbs, BackendError>;

    /// Short human-readable identity, recorded in run manifests.
    fn describe(&self) -> String;
}

pub type BackendHandle = Arc<dyn LanguageModel>;

/// Where a backend comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Scripted { path: PathBuf },
    Http { base_url: String, model: String },
}

impl BackendDescriptor {
    /// `http://` or `https://` URLs select the HTTP client; anything else is a
    /// scripted spec path.
    pub fn parse(value: &str, model: Option<&str>) -> Self {
        if value.starts_with("http://") || value.starts_with("https://") {
            BackendDescriptor::Http {
                base_url: value.to_string(),
                model: model.unwrap_or("default").to_string(),
            }
        } else {
            BackendDescriptor::Scripted { path: value.into() }
        }
    }
}

pub fn open_backend(desc: &BackendDescriptor, max_in_flight: usize) -> Result<BackendHandle, BackendError> {
    match desc {
        BackendDescriptor::Scripted { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| BackendError::InvalidSpec(format!("{}: {e}", path.display())))?;
            Ok(Arc::new(ScriptedBackend::from_json(&text)?))
        }
        BackendDescriptor::Http { base_url, model } => {
            let mut cfg = HttpConfig::new(base_url.clone(), model.clone());
            cfg.max_in_flight = max_in_flight.max(1);
            cfg.token = std::env::var(TOKEN_ENV_VAR).ok();
            Ok(Arc::new(HttpBackend::new(cfg)?))
        }
    }
}

/// Rejects prompts over the backend's budget before any call is made.
pub(crate) fn check_context(limit: Option<usize>, prompt: &str) -> Result<(), BackendError> {
    if let Some(limit) = limit {
        let tokens = split_tokens(prompt).len();
        if tokens > limit {
            return Err(BackendError::ContextOverflow { tokens, limit });
        }
    }
    Ok(())
}
