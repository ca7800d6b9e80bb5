//! Client for completion-style inference servers (`POST {base}/v1/completions`).
//!
//! Scoring uses echo mode: the prompt and continuation are sent together with
//! `max_tokens: 0, echo: true, logprobs: 1`, and the token logprobs covering the
//! continuation suffix are read back.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    check_context, BackendError, Capabilities, FinishReason, Generation, GenerationParams,
    LanguageModel, TokenLogProbs,
};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV_VAR: &str = "GROUNDRE_API_TOKEN";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub max_context: Option<usize>,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            max_context: None,
            max_in_flight: 4,
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    cfg: HttpConfig,
    url: String,
    client: reqwest::blocking::Client,
    gate: Gate,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Deserialize)]
struct LogprobBlock {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::InvalidSpec(e.to_string()))?;
        let url = format!("{}/v1/completions", cfg.base_url.trim_end_matches('/'));
        let gate = Gate::new(cfg.max_in_flight.max(1));
        Ok(Self {
            cfg,
            url,
            client,
            gate,
        })
    }

    /// POSTs `body`, retrying transport failures and 5xx responses with
    /// exponential backoff. Other failures surface immediately.
    fn post(&self, body: &Value) -> Result<CompletionResponse, BackendError> {
        let _permit = self.gate.acquire();
        let mut backoff = self.cfg.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            debug!(target: "groundre::http", url = %self.url, request = %body, attempt, "request");
            let mut req = self.client.post(&self.url).json(body);
            if let Some(token) = &self.cfg.token {
                req = req.bearer_auth(token);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    debug!(target: "groundre::http", status = status.as_u16(), response = %text, "response");
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::Protocol(format!("{e}: {text}")));
                    }
                    let err = BackendError::Status {
                        status: status.as_u16(),
                        body: text,
                    };
                    if !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.cfg.max_retries {
                return Err(match retryable {
                    BackendError::Transport { message, .. } => BackendError::Transport {
                        attempts: attempt,
                        message,
                    },
                    other => other,
                });
            }
            warn!(target: "groundre::http", attempt, error = %retryable, "retrying");
            thread::sleep(backoff);
            backoff *= 2;
        }
    }
}

/// Picks the tokens of an echoed `prompt + continuation` that cover the
/// continuation. A token straddling the boundary is trimmed to its suffix.
fn continuation_suffix(
    block: LogprobBlock,
    prompt_len: usize,
    continuation: &str,
) -> Result<TokenLogProbs, BackendError> {
    if block.tokens.len() != block.token_logprobs.len() {
        return Err(BackendError::Protocol(
            "tokens and token_logprobs differ in length".into(),
        ));
    }
    let offsets: Vec<usize> = match block.text_offset {
        Some(o) if o.len() == block.tokens.len() => o,
        _ => block
            .tokens
            .iter()
            .scan(0usize, |acc, t| {
                let start = *acc;
                *acc += t.len();
                Some(start)
            })
            .collect(),
    };
    let mut out = TokenLogProbs::default();
    for ((token, lp), start) in block.tokens.into_iter().zip(block.token_logprobs).zip(offsets) {
        let end = start + token.len();
        if end <= prompt_len {
            continue;
        }
        let lp = lp.ok_or_else(|| BackendError::Protocol("null logprob inside continuation".into()))?;
        let text = if start < prompt_len {
            token.get(prompt_len - start..).unwrap_or(&token).to_string()
        } else {
            token
        };
        out.tokens.push(text);
        out.logprobs.push(lp);
    }
    if out.tokens.concat() != continuation {
        warn!(target: "groundre::http", "server tokens do not reconstruct the continuation exactly");
    }
    Ok(out)
}

impl LanguageModel for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            score: true,
        }
    }

    fn max_context(&self) -> Option<usize> {
        self.cfg.max_context
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Generation, BackendError> {
        check_context(self.cfg.max_context, prompt)?;
        let body = json!({
            "model": self.cfg.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "stop": params.stop,
            "logprobs": 0,
            "echo": false,
        });
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("no choices in response".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(Generation {
            text: choice.text,
            finish_reason,
        })
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenLogProbs, BackendError> {
        check_context(self.cfg.max_context, prompt)?;
        if continuation.is_empty() {
            return Ok(TokenLogProbs::default());
        }
        let body = json!({
            "model": self.cfg.model,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self.post(&body)?;
        let block = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::Protocol("response carries no logprobs".into()))?;
        continuation_suffix(block, prompt.len(), continuation)
    }

    fn describe(&self) -> String {
        format!("http({}, model={})", self.cfg.base_url, self.cfg.model)
    }
}
