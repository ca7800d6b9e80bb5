//! Recall and reason prompt rendering, and parsing of model outputs.
//!
//! Templates are plain text with `{name}` placeholders. A template set carries a
//! version string that is recorded with every emitted tuning instance and
//! prediction, so training and inference prompts can be matched up later.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, Schema};
use crate::pair_index::EntityPair;

pub const PAIR_SEPARATOR: &str = " | ";

const DEFAULT_VERSION: &str = "rrr-v1";

const DEFAULT_RECALL: &str = "\
Generate {k} entity pairs from the training corpus that hold the same relation as the head and tail entities of the sentence below.

Sentence: {sentence}
Head: {head}
Tail: {tail}

Output format: write exactly {k} entity pair(s), one per line, as \"head | tail\".
Entity pairs:
";

const DEFAULT_REASON: &str = "\
Identify the relation between the head and tail entities of the last sentence. Use the demonstrations as reference.

{demonstrations}{query}";

const DEFAULT_DEMONSTRATION: &str = "\
Sentence: {sentence}
Head: {head}
Tail: {tail}
Relation: {relation}";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template `{template}` is missing placeholder `{{{placeholder}}}`")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("demonstration template must end with `{{relation}}`")]
    RelationNotLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Recall,
    Reason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptText {
    pub text: String,
    pub kind: PromptKind,
    /// Requested pair count for recall prompts; demonstration count for reason prompts.
    pub rendered_k: usize,
}

impl AsRef<str> for PromptText {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

/// A versioned template set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub version: String,
    pub recall: String,
    pub reason: String,
    pub demonstration: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            version: DEFAULT_VERSION.to_string(),
            recall: DEFAULT_RECALL.to_string(),
            reason: DEFAULT_REASON.to_string(),
            demonstration: DEFAULT_DEMONSTRATION.to_string(),
        }
    }
}

impl Templates {
    /// Loads `recall.txt`, `reason.txt`, `demonstration.txt` and `version.txt`
    /// from `dir`. Missing files fall back to the built-in template.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(TemplateError::Io { path, source }),
            }
        };
        let defaults = Templates::default();
        let t = Templates {
            version: read("version.txt")?
                .map(|v| v.trim().to_string())
                .unwrap_or(defaults.version),
            recall: read("recall.txt")?.unwrap_or(defaults.recall),
            reason: read("reason.txt")?.unwrap_or(defaults.reason),
            demonstration: read("demonstration.txt")?.unwrap_or(defaults.demonstration),
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), TemplateError> {
        let required: [(&'static str, &str, &[&'static str]); 3] = [
            ("recall", &self.recall, &["sentence", "head", "tail", "k"]),
            ("reason", &self.reason, &["demonstrations", "query"]),
            (
                "demonstration",
                &self.demonstration,
                &["sentence", "head", "tail", "relation"],
            ),
        ];
        for (template, text, names) in required {
            for &placeholder in names {
                if !text.contains(&format!("{{{placeholder}}}")) {
                    return Err(TemplateError::MissingPlaceholder { template, placeholder });
                }
            }
        }
        if !self.demonstration.trim_end().ends_with("{relation}") {
            return Err(TemplateError::RelationNotLast);
        }
        Ok(())
    }

    /// Recall prompt asking for `k` pairs sharing the example's relation.
    pub fn render_recall(&self, example: &Example, k: usize) -> PromptText {
        let k_text = k.to_string();
        let sentence = example.sentence();
        let text = fill(
            &self.recall,
            &[
                ("sentence", &sentence),
                ("head", &example.head.text),
                ("tail", &example.tail.text),
                ("k", &k_text),
            ],
        );
        PromptText {
            text,
            kind: PromptKind::Recall,
            rendered_k: k,
        }
    }

    /// Reason prompt with demonstrations in the given order, followed by the test
    /// example whose relation is left for completion.
    pub fn render_reason(&self, example: &Example, demos: &[&Example]) -> PromptText {
        let mut block = String::new();
        for d in demos {
            block.push_str(&self.structural_sentence(d, &d.relation));
            block.push_str("\n\n");
        }
        let query = self.structural_sentence(example, "");
        let text = fill(&self.reason, &[("demonstrations", &block), ("query", &query)]);
        PromptText {
            text,
            kind: PromptKind::Reason,
            rendered_k: demos.len(),
        }
    }

    fn structural_sentence(&self, e: &Example, relation: &str) -> String {
        let sentence = e.sentence();
        let template = if relation.is_empty() {
            // Keep the space after `Relation:` so a completion reads naturally.
            self.demonstration.trim_end()
        } else {
            self.demonstration.as_str()
        };
        fill(
            template,
            &[
                ("sentence", &sentence),
                ("head", &e.head.text),
                ("tail", &e.tail.text),
                ("relation", relation),
            ],
        )
    }
}

/// Replaces `{name}` placeholders. Unknown placeholders are left as written and
/// substituted values are never expanded again.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_recall_prompt(example: &Example, k: usize) -> PromptText {
    Templates::default().render_recall(example, k)
}

pub fn render_reason_prompt(example: &Example, demos: &[&Example]) -> PromptText {
    Templates::default().render_reason(example, demos)
}

/// One `head | tail` line.
pub fn format_pair_line(head: &str, tail: &str) -> String {
    format!("{head}{PAIR_SEPARATOR}{tail}")
}

/// Pair lines joined by newlines, no trailing newline.
pub fn format_pair_lines<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    pairs
        .into_iter()
        .map(|(h, t)| format_pair_line(h, t))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    /// 1-based line number in the raw output; 0 for whole-output issues.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPairs {
    pub pairs: Vec<EntityPair>,
    pub issues: Vec<ParseIssue>,
}

fn enumeration_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\d+[.)]|[-*•])\s+").expect("valid regex"))
}

/// Parses up to `k` `head | tail` lines. Enumeration prefixes such as `1.` or `-`
/// are dropped; malformed lines are skipped and reported.
pub fn parse_entity_pairs(raw: &str, k: usize) -> ParsedPairs {
    let mut parsed = ParsedPairs::default();
    if raw.trim().is_empty() {
        parsed.issues.push(ParseIssue {
            line: 0,
            reason: "empty output".into(),
        });
        return parsed;
    }
    let mut extra = 0usize;
    let mut first_extra = 0usize;
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let body = enumeration_prefix().replace(trimmed, "");
        let parts: Vec<&str> = body.split('|').collect();
        let issue = match parts.as_slice() {
            [h, t] => {
                let (h, t) = (h.trim(), t.trim());
                if h.is_empty() || t.is_empty() {
                    Some("empty head or tail")
                } else if parsed.pairs.len() >= k {
                    if extra == 0 {
                        first_extra = lineno;
                    }
                    extra += 1;
                    None
                } else {
                    parsed.pairs.push(EntityPair::new(h, t));
                    None
                }
            }
            [_] => Some("missing `|` separator"),
            _ => Some("more than one `|` separator"),
        };
        if let Some(reason) = issue {
            parsed.issues.push(ParseIssue {
                line: lineno,
                reason: reason.into(),
            });
        }
    }
    if extra > 0 {
        parsed.issues.push(ParseIssue {
            line: first_extra,
            reason: format!("{extra} pair line(s) beyond k={k} ignored"),
        });
    }
    parsed
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationParse {
    pub label: String,
    pub parse_ok: bool,
}

/// Label normalization: trim, lowercase, underscores as spaces, collapsed whitespace.
fn normalize_label(s: &str) -> String {
    s.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Matches the first non-empty line of `raw` against the schema and NA label.
/// Unmatched output maps to NA with `parse_ok = false`. With `fuzzy`, a unique
/// label within edit distance 1 is accepted.
pub fn parse_relation(raw: &str, schema: &Schema, fuzzy: bool) -> RelationParse {
    let first = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let wanted = normalize_label(first);
    let labels = schema.relations.iter().chain(std::iter::once(&schema.na_label));

    let mut normalized: HashMap<String, &String> = HashMap::new();
    let mut ordered = Vec::new();
    for label in labels {
        let n = normalize_label(label);
        if !normalized.contains_key(&n) {
            normalized.insert(n.clone(), label);
            ordered.push((n, label));
        }
    }

    if !wanted.is_empty() {
        if let Some(label) = normalized.get(&wanted) {
            return RelationParse {
                label: (*label).clone(),
                parse_ok: true,
            };
        }
        if fuzzy {
            let close: Vec<_> = ordered
                .iter()
                .filter(|(n, _)| levenshtein(n, &wanted) <= 1)
                .collect();
            if let [(_, label)] = close.as_slice() {
                return RelationParse {
                    label: (*label).clone(),
                    parse_ok: true,
                };
            }
        }
    }
    RelationParse {
        label: schema.na_label.clone(),
        parse_ok: false,
    }
}
