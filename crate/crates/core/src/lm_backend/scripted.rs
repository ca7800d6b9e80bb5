//! Deterministic scripted backend for tests and fixtures.
//!
//! A spec is an ordered rule list. Generation returns the completion of the first
//! rule whose matcher accepts the prompt. Scoring returns the recorded logprobs of
//! the first rule whose matcher accepts the prompt and whose completion equals the
//! continuation; otherwise the uniform fallback assigns `-ln V` to every token.
//!
//! Tokens are whitespace-led runs: `"A | B\n"` is `["A", " |", " B", "\n"]`.

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    check_context, BackendError, Capabilities, FinishReason, Generation, GenerationParams,
    LanguageModel, TokenLogProbs,
};

/// Splits text into whitespace-led tokens. Concatenating the result gives back
/// the input.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if seen_word {
                tokens.push(&text[start..i]);
                start = i;
                seen_word = false;
            }
        } else {
            seen_word = true;
        }
    }
    if start < text.len() {
        tokens.push(&text[start..]);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Prefix(String),
    Suffix(String),
    Contains(String),
    Regex(String),
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RuleUse {
    #[default]
    Both,
    Generate,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub completion: String,
    /// Explicit tokenization of `completion`; defaults to [`split_tokens`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    /// Per-token logprobs. When absent, tokens get the fallback's `-ln V`, or 0
    /// when no fallback vocabulary is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default, rename = "use", skip_serializing_if = "is_both")]
    pub applies_to: RuleUse,
}

fn is_both(u: &RuleUse) -> bool {
    *u == RuleUse::Both
}

impl Rule {
    pub fn new(matcher: Matcher, completion: impl Into<String>) -> Self {
        Self {
            matcher,
            completion: completion.into(),
            tokens: None,
            logprobs: None,
            applies_to: RuleUse::Both,
        }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.logprobs = Some(logprobs);
        self
    }

    pub fn with_tokens(mut self, tokens: Vec<String>) -> Self {
        self.tokens = Some(tokens);
        self
    }

    pub fn only(mut self, applies_to: RuleUse) -> Self {
        self.applies_to = applies_to;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Fallback {
    /// Uniform vocabulary size for scoring unmatched continuations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    /// Generation output when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScriptedSpec {
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
}

impl ScriptedSpec {
    pub fn uniform(vocab_size: u32) -> Self {
        Self {
            rules: Vec::new(),
            fallback: Fallback {
                vocab_size: Some(vocab_size),
                text: None,
            },
            max_context: None,
        }
    }
}

/// Accepts either a full spec object or a bare rule list.
#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Full(ScriptedSpec),
    Rules(Vec<Rule>),
}

#[derive(Debug)]
pub struct ScriptedBackend {
    spec: ScriptedSpec,
    regexes: Vec<Option<Regex>>,
    exact: HashMap<String, Vec<usize>>,
    inexact: Vec<usize>,
}

impl ScriptedBackend {
    pub fn new(spec: ScriptedSpec) -> Result<Self, BackendError> {
        if spec.fallback.vocab_size == Some(0) {
            return Err(BackendError::InvalidSpec("fallback vocab_size must be ≥ 1".into()));
        }
        let mut regexes = Vec::with_capacity(spec.rules.len());
        let mut exact: HashMap<String, Vec<usize>> = HashMap::new();
        let mut inexact = Vec::new();
        for (i, rule) in spec.rules.iter().enumerate() {
            let invalid = |msg: String| BackendError::InvalidSpec(format!("rule {i}: {msg}"));
            let n_tokens = match &rule.tokens {
                Some(tokens) => {
                    if tokens.concat() != rule.completion {
                        return Err(invalid("tokens do not concatenate to the completion".into()));
                    }
                    tokens.len()
                }
                None => split_tokens(&rule.completion).len(),
            };
            if let Some(lp) = &rule.logprobs {
                if lp.len() != n_tokens {
                    return Err(invalid(format!(
                        "{} logprobs for {n_tokens} tokens",
                        lp.len()
                    )));
                }
                if lp.iter().any(|v| !v.is_finite() || *v > 0.0) {
                    return Err(invalid("logprobs must be finite and ≤ 0".into()));
                }
            }
            match &rule.matcher {
                Matcher::Regex(pattern) => {
                    let re = Regex::new(pattern).map_err(|e| invalid(e.to_string()))?;
                    regexes.push(Some(re));
                    inexact.push(i);
                }
                Matcher::Exact(p) => {
                    regexes.push(None);
                    exact.entry(p.clone()).or_default().push(i);
                }
                _ => {
                    regexes.push(None);
                    inexact.push(i);
                }
            }
        }
        Ok(Self {
            spec,
            regexes,
            exact,
            inexact,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let file: SpecFile =
            serde_json::from_str(json).map_err(|e| BackendError::InvalidSpec(e.to_string()))?;
        let spec = match file {
            SpecFile::Full(spec) => spec,
            SpecFile::Rules(rules) => ScriptedSpec {
                rules,
                ..Default::default()
            },
        };
        Self::new(spec)
    }

    pub fn spec(&self) -> &ScriptedSpec {
        &self.spec
    }

    fn matches(&self, i: usize, prompt: &str) -> bool {
        match &self.spec.rules[i].matcher {
            Matcher::Exact(p) => prompt == p,
            Matcher::Prefix(p) => prompt.starts_with(p.as_str()),
            Matcher::Suffix(p) => prompt.ends_with(p.as_str()),
            Matcher::Contains(p) => prompt.contains(p.as_str()),
            Matcher::Regex(_) => self.regexes[i].as_ref().is_some_and(|re| re.is_match(prompt)),
            Matcher::Any => true,
        }
    }

    /// Index of the first rule accepted by `filter` whose matcher accepts `prompt`.
    fn first_rule(&self, prompt: &str, filter: impl Fn(&Rule) -> bool) -> Option<usize> {
        let from_exact = self
            .exact
            .get(prompt)
            .and_then(|ids| ids.iter().copied().find(|&i| filter(&self.spec.rules[i])));
        let from_inexact = self
            .inexact
            .iter()
            .copied()
            .take_while(|&i| from_exact.is_none_or(|e| i < e))
            .find(|&i| filter(&self.spec.rules[i]) && self.matches(i, prompt));
        from_inexact.or(from_exact)
    }

    fn uniform_logprob(&self) -> Option<f64> {
        self.spec.fallback.vocab_size.map(|v| -(v as f64).ln())
    }
}

fn prompt_start(prompt: &str) -> String {
    prompt.chars().take(60).collect()
}

impl LanguageModel for ScriptedBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            score: true,
        }
    }

    fn max_context(&self) -> Option<usize> {
        self.spec.max_context
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Generation, BackendError> {
        check_context(self.spec.max_context, prompt)?;
        let full = match self.first_rule(prompt, |r| r.applies_to != RuleUse::Score) {
            Some(i) => self.spec.rules[i].completion.as_str(),
            None => self
                .spec
                .fallback
                .text
                .as_deref()
                .ok_or_else(|| BackendError::RuleMiss {
                    prompt_start: prompt_start(prompt),
                })?,
        };

        let mut text = full;
        if let Some(cut) = params.stop.iter().filter(|s| !s.is_empty()).filter_map(|s| full.find(s.as_str())).min() {
            text = &full[..cut];
        }
        let tokens = split_tokens(text);
        if tokens.len() > params.max_tokens {
            let end: usize = tokens[..params.max_tokens].iter().map(|t| t.len()).sum();
            return Ok(Generation {
                text: text[..end].to_string(),
                finish_reason: FinishReason::Length,
            });
        }
        Ok(Generation {
            text: text.to_string(),
            finish_reason: FinishReason::Stop,
        })
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenLogProbs, BackendError> {
        check_context(self.spec.max_context, prompt)?;
        if let Some(i) = self.first_rule(prompt, |r| {
            r.applies_to != RuleUse::Generate && r.completion == continuation
        }) {
            let rule = &self.spec.rules[i];
            let tokens: Vec<String> = match &rule.tokens {
                Some(t) => t.clone(),
                None => split_tokens(&rule.completion).into_iter().map(str::to_string).collect(),
            };
            let logprobs = match &rule.logprobs {
                Some(lp) => lp.clone(),
                None => vec![self.uniform_logprob().unwrap_or(0.0); tokens.len()],
            };
            return Ok(TokenLogProbs { tokens, logprobs });
        }
        let lp = self.uniform_logprob().ok_or_else(|| BackendError::RuleMiss {
            prompt_start: prompt_start(prompt),
        })?;
        let tokens: Vec<String> = split_tokens(continuation).into_iter().map(str::to_string).collect();
        let logprobs = vec![lp; tokens.len()];
        Ok(TokenLogProbs { tokens, logprobs })
    }

    fn describe(&self) -> String {
        format!("scripted({} rules)", self.spec.rules.len())
    }
}
