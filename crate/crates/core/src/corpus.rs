//! Relation-extraction data model and dataset ingestion.
//!
//! Two on-disk formats are accepted:
//!
//! - canonical JSONL, one example per line:
//!   `{"id","tokens","head":{"text","type","start","end"},"tail":{...},"relation"}`.
//!   A record may carry `"text"` instead of `"tokens"`; it is split on whitespace
//!   (lossy: original spacing is not preserved).
//! - TACRED-style JSON arrays with `token`, `subj_*`, `obj_*` fields. TACRED end
//!   offsets are inclusive and are converted to exclusive spans on ingest.
//!
//! All strings are NFC-normalized on ingest. The NA label is corpus metadata and
//! never part of the schema.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::pair_index::PairKey;

pub const DEFAULT_NA_LABEL: &str = "NA";
pub const TACRED_NA_LABEL: &str = "no_relation";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record (field `{field}`): {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}:{line}: example `{id}` has relation `{relation}` outside the declared schema")]
    UnknownRelation {
        path: PathBuf,
        line: usize,
        id: String,
        relation: String,
    },
    #[error("{path}:{line}: duplicate example id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: example `{id}` is invalid: {violation}")]
    Invalid {
        path: PathBuf,
        line: usize,
        id: String,
        violation: Violation,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("no corpus split files found under {0}")]
    NoSplits(PathBuf),
}

/// On-disk dataset format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    #[default]
    CanonicalJsonl,
    TacredJson,
}

impl CorpusFormat {
    fn extension(self) -> &'static str {
        match self {
            CorpusFormat::CanonicalJsonl => "jsonl",
            CorpusFormat::TacredJson => "json",
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical-jsonl" | "jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "tacred-json" | "tacred" => Ok(CorpusFormat::TacredJson),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

/// An entity mention. `span` is `(start, end)` in tokens, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub text: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(with = "span_fields", flatten)]
    pub span: Option<(usize, usize)>,
}

impl Mention {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            entity_type: None,
            span: None,
        }
    }

    pub fn with_span(mut self, start: usize, end: usize) -> Self {
        self.span = Some((start, end));
        self
    }

    pub fn with_type(mut self, entity_type: impl Into<String>) -> Self {
        self.entity_type = Some(entity_type.into());
        self
    }
}

mod span_fields {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Span {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        end: Option<usize>,
    }

    pub fn serialize<S: Serializer>(span: &Option<(usize, usize)>, s: S) -> Result<S::Ok, S::Error> {
        let span = Span {
            start: span.map(|(a, _)| a),
            end: span.map(|(_, b)| b),
        };
        span.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<(usize, usize)>, D::Error> {
        let span = Span::deserialize(d)?;
        match (span.start, span.end) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(serde::de::Error::custom("span needs both `start` and `end`")),
        }
    }
}

/// One annotated relation instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: Mention,
    pub tail: Mention,
    pub relation: String,
}

impl Example {
    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn pair_key(&self, norm: &crate::pair_index::NormConfig) -> PairKey {
        PairKey::new(&self.head.text, &self.tail.text, norm)
    }
}

/// Ordered relation labels plus the NA label, which is kept outside the schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub relations: Vec<String>,
    pub na_label: String,
}

impl Schema {
    pub fn new(relations: Vec<String>, na_label: impl Into<String>) -> Result<Self, CorpusError> {
        let na_label = na_label.into();
        let mut seen = HashSet::new();
        for r in &relations {
            if *r == na_label {
                return Err(CorpusError::Schema(format!(
                    "NA label `{na_label}` must not be listed as a relation"
                )));
            }
            if !seen.insert(r.as_str()) {
                return Err(CorpusError::Schema(format!("relation `{r}` listed twice")));
            }
        }
        Ok(Self { relations, na_label })
    }

    pub fn contains(&self, label: &str) -> bool {
        self.relations.iter().any(|r| r == label)
    }

    /// True for schema labels and the NA label.
    pub fn accepts(&self, label: &str) -> bool {
        label == self.na_label || self.contains(label)
    }

    pub fn is_na(&self, label: &str) -> bool {
        label == self.na_label
    }

    /// Schema labels followed by the NA label.
    pub fn all_labels(&self) -> Vec<String> {
        let mut labels = self.relations.clone();
        labels.push(self.na_label.clone());
        labels
    }
}

/// A dataset: schema plus named splits in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub schema: Schema,
    pub splits: BTreeMap<String, Vec<Example>>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Example]> {
        self.splits.get(name).map(Vec::as_slice)
    }

    pub fn find(&self, split: &str, id: &str) -> Option<&Example> {
        self.split(split)?.iter().find(|e| e.id == id)
    }
}

/// Options controlling ingestion.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub format: CorpusFormat,
    /// Defaults to `NA` for canonical data and `no_relation` handling for TACRED.
    pub na_label: Option<String>,
    /// Declared schema. When absent, it is inferred from the data in order of first
    /// appearance. A `schema.json` next to the data takes precedence over inference.
    pub relations: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct SchemaFile {
    relations: Vec<String>,
    #[serde(default)]
    na_label: Option<String>,
}

const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// Loads a corpus from a split file or a directory of split files.
///
/// A directory is scanned for `train`, `dev` and `test` files with the format's
/// extension and an optional `schema.json`. A single file becomes one split named
/// after its file stem.
pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    let mut declared = opts.relations.clone();
    let mut na_label = opts.na_label.clone();

    if meta.is_dir() {
        let schema_path = path.join("schema.json");
        if schema_path.exists() {
            let text = fs::read_to_string(&schema_path).map_err(|source| CorpusError::Io {
                path: schema_path.clone(),
                source,
            })?;
            let file: SchemaFile =
                serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                    path: schema_path.clone(),
                    line: e.line(),
                    field: "relations".into(),
                    reason: e.to_string(),
                })?;
            declared = declared.or(Some(file.relations));
            na_label = na_label.or(file.na_label);
        }
        for name in SPLIT_NAMES {
            let candidate = path.join(format!("{name}.{}", opts.format.extension()));
            if candidate.exists() {
                files.push((name.to_string(), candidate));
            }
        }
        if files.is_empty() {
            return Err(CorpusError::NoSplits(path.to_path_buf()));
        }
    } else {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("train")
            .to_string();
        files.push((stem, path.to_path_buf()));
    }

    let na_label = na_label.unwrap_or_else(|| DEFAULT_NA_LABEL.to_string());

    let mut raw_splits = Vec::new();
    for (name, file) in files {
        let records = match opts.format {
            CorpusFormat::CanonicalJsonl => read_canonical(&file)?,
            CorpusFormat::TacredJson => read_tacred(&file, &na_label)?,
        };
        raw_splits.push((name, file, records));
    }

    let schema = match declared {
        Some(relations) => Schema::new(relations.into_iter().map(nfc).collect(), na_label)?,
        None => {
            let mut seen = HashSet::new();
            let mut relations = Vec::new();
            for (_, _, records) in &raw_splits {
                for (_, e) in records {
                    if e.relation != na_label && seen.insert(e.relation.clone()) {
                        relations.push(e.relation.clone());
                    }
                }
            }
            Schema::new(relations, na_label)?
        }
    };

    let mut splits = BTreeMap::new();
    for (name, file, records) in raw_splits {
        let mut ids = HashSet::new();
        let mut examples = Vec::with_capacity(records.len());
        for (line, e) in records {
            if !ids.insert(e.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    path: file,
                    line,
                    id: e.id,
                });
            }
            if !schema.accepts(&e.relation) {
                return Err(CorpusError::UnknownRelation {
                    path: file,
                    line,
                    id: e.id.clone(),
                    relation: e.relation,
                });
            }
            if let Some(violation) = validate_example(&e, &schema).violations.into_iter().next() {
                return Err(CorpusError::Invalid {
                    path: file,
                    line,
                    id: e.id,
                    violation,
                });
            }
            examples.push(e);
        }
        splits.insert(name, examples);
    }

    Ok(Corpus { schema, splits })
}

#[derive(Deserialize)]
struct CanonicalRecord {
    id: Option<String>,
    tokens: Option<Vec<String>>,
    #[serde(alias = "sentence")]
    text: Option<String>,
    head: Option<Mention>,
    tail: Option<Mention>,
    relation: Option<String>,
}

fn read_canonical(path: &Path) -> Result<Vec<(usize, Example)>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |field: &str, reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            field: field.to_string(),
            reason,
        };
        let rec: CanonicalRecord = serde_json::from_str(&line).map_err(|e| {
            let reason = e.to_string();
            let field = ["head", "tail", "tokens", "id", "relation"]
                .into_iter()
                .find(|f| reason.contains(&format!("`{f}`")))
                .unwrap_or("record");
            malformed(field, reason)
        })?;
        let id = rec.id.ok_or_else(|| malformed("id", "missing".into()))?;
        let tokens = match (rec.tokens, rec.text) {
            (Some(tokens), _) => tokens,
            (None, Some(text)) => text.split_whitespace().map(str::to_string).collect(),
            (None, None) => return Err(malformed("tokens", "missing (no `tokens` or `text`)".into())),
        };
        let head = rec.head.ok_or_else(|| malformed("head", "missing".into()))?;
        let tail = rec.tail.ok_or_else(|| malformed("tail", "missing".into()))?;
        let relation = rec.relation.ok_or_else(|| malformed("relation", "missing".into()))?;
        out.push((lineno, normalize_example(Example { id, tokens, head, tail, relation })));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct TacredRecord {
    id: String,
    token: Vec<String>,
    subj_start: usize,
    subj_end: usize,
    #[serde(default)]
    subj_type: Option<String>,
    obj_start: usize,
    obj_end: usize,
    #[serde(default)]
    obj_type: Option<String>,
    relation: String,
}

fn read_tacred(path: &Path, na_label: &str) -> Result<Vec<(usize, Example)>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            field: "record".into(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::with_capacity(values.len());
    for (i, value) in values.into_iter().enumerate() {
        // TACRED arrays have no line structure; report the 1-based record index.
        let lineno = i + 1;
        let rec: TacredRecord = serde_json::from_value(value).map_err(|e| {
            let reason = e.to_string();
            let field = reason
                .split('`')
                .nth(1)
                .unwrap_or("record")
                .to_string();
            CorpusError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                field,
                reason,
            }
        })?;
        let mention = |start: usize, end_inclusive: usize, ty: Option<String>| {
            let end = end_inclusive + 1;
            let text = rec
                .token
                .get(start..end.min(rec.token.len()))
                .map(|t| t.join(" "))
                .unwrap_or_default();
            Mention {
                text,
                entity_type: ty,
                span: Some((start, end)),
            }
        };
        let head = mention(rec.subj_start, rec.subj_end, rec.subj_type.clone());
        let tail = mention(rec.obj_start, rec.obj_end, rec.obj_type.clone());
        let relation = if rec.relation == TACRED_NA_LABEL {
            na_label.to_string()
        } else {
            rec.relation
        };
        out.push((
            lineno,
            normalize_example(Example {
                id: rec.id,
                tokens: rec.token,
                head,
                tail,
                relation,
            }),
        ));
    }
    Ok(out)
}

fn nfc(s: String) -> String {
    if unicode_normalization::is_nfc(&s) {
        s
    } else {
        s.nfc().collect()
    }
}

fn normalize_mention(m: Mention) -> Mention {
    Mention {
        text: nfc(m.text),
        entity_type: m.entity_type.map(nfc),
        span: m.span,
    }
}

fn normalize_example(e: Example) -> Example {
    Example {
        id: nfc(e.id),
        tokens: e.tokens.into_iter().map(nfc).collect(),
        head: normalize_mention(e.head),
        tail: normalize_mention(e.tail),
        relation: nfc(e.relation),
    }
}

/// Writes examples as canonical JSONL, one record per line.
pub fn write_jsonl<W: Write>(mut out: W, examples: &[Example]) -> io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// SHA-256 over the canonical serialization of a split.
pub fn fingerprint(examples: &[Example]) -> String {
    let mut hasher = Sha256::new();
    for e in examples {
        // Serializing plain strings and integers cannot fail.
        let line = serde_json::to_vec(e).expect("example serializes");
        hasher.update(&line);
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyId,
    EmptyTokens,
    EmptyMention { role: Role },
    SpanOrder { role: Role, start: usize, end: usize },
    SpanOutOfBounds { role: Role, end: usize, tokens: usize },
    SpanTextMismatch { role: Role, text: String, span_text: String },
    UnknownRelation { relation: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Head,
    Tail,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Head => "head",
            Role::Tail => "tail",
        })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "id is empty"),
            Violation::EmptyTokens => write!(f, "example has no tokens"),
            Violation::EmptyMention { role } => write!(f, "{role} mention text is empty"),
            Violation::SpanOrder { role, start, end } => {
                write!(f, "{role} span ({start},{end}) violates start < end")
            }
            Violation::SpanOutOfBounds { role, end, tokens } => {
                write!(f, "{role} span end {end} exceeds token count {tokens}")
            }
            Violation::SpanTextMismatch { role, text, span_text } => write!(
                f,
                "{role} text `{text}` differs from span tokens `{span_text}`"
            ),
            Violation::UnknownRelation { relation } => {
                write!(f, "relation `{relation}` is not in the schema")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant the example violates against `schema`.
pub fn validate_example(example: &Example, schema: &Schema) -> ValidationReport {
    let mut violations = Vec::new();
    if example.id.is_empty() {
        violations.push(Violation::EmptyId);
    }
    if example.tokens.is_empty() {
        violations.push(Violation::EmptyTokens);
    }
    for (role, mention) in [(Role::Head, &example.head), (Role::Tail, &example.tail)] {
        if mention.text.trim().is_empty() {
            violations.push(Violation::EmptyMention { role });
        }
        if let Some((start, end)) = mention.span {
            if start >= end {
                violations.push(Violation::SpanOrder { role, start, end });
            } else if end > example.tokens.len() {
                violations.push(Violation::SpanOutOfBounds {
                    role,
                    end,
                    tokens: example.tokens.len(),
                });
            } else {
                let span_text = example.tokens[start..end].join(" ");
                if span_text != mention.text {
                    violations.push(Violation::SpanTextMismatch {
                        role,
                        text: mention.text.clone(),
                        span_text,
                    });
                }
            }
        }
    }
    if !schema.accepts(&example.relation) {
        violations.push(Violation::UnknownRelation {
            relation: example.relation.clone(),
        });
    }
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub relations: usize,
    pub na_label: String,
    pub split_sizes: BTreeMap<String, usize>,
    /// Per split, label → example count (NA included).
    pub relation_frequency: BTreeMap<String, BTreeMap<String, usize>>,
    /// Train-split relations with fewer than `k` distinct entity pairs.
    pub k: usize,
    pub relations_below_k_pairs: usize,
}

/// Counts examples per split and per relation. Pair counts use the `train` split
/// (or the first split when there is none) under default normalization.
pub fn corpus_stats(corpus: &Corpus, k: usize) -> StatsReport {
    let norm = crate::pair_index::NormConfig::default();
    let split_sizes = corpus
        .splits
        .iter()
        .map(|(name, ex)| (name.clone(), ex.len()))
        .collect();
    let relation_frequency = corpus
        .splits
        .iter()
        .map(|(name, ex)| {
            let mut freq = BTreeMap::new();
            for e in ex {
                *freq.entry(e.relation.clone()).or_insert(0) += 1;
            }
            (name.clone(), freq)
        })
        .collect();

    let pair_split = corpus
        .split("train")
        .or_else(|| corpus.splits.values().next().map(Vec::as_slice))
        .unwrap_or(&[]);
    let mut pairs: BTreeMap<&str, HashSet<PairKey>> = corpus
        .schema
        .relations
        .iter()
        .map(|r| (r.as_str(), HashSet::new()))
        .collect();
    for e in pair_split {
        if let Some(set) = pairs.get_mut(e.relation.as_str()) {
            set.insert(e.pair_key(&norm));
        }
    }
    let relations_below_k_pairs = pairs.values().filter(|s| s.len() < k).count();

    StatsReport {
        relations: corpus.schema.relations.len(),
        na_label: corpus.schema.na_label.clone(),
        split_sizes,
        relation_frequency,
        k,
        relations_below_k_pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, rel: &str) -> Example {
        Example {
            id: id.into(),
            tokens: "Carnegie Mellon University is located in Pittsburgh"
                .split(' ')
                .map(String::from)
                .collect(),
            head: Mention::new("Carnegie Mellon University").with_span(0, 3),
            tail: Mention::new("Pittsburgh").with_span(6, 7),
            relation: rel.into(),
        }
    }

    fn schema() -> Schema {
        Schema::new(vec!["located_in".into(), "org:founded".into()], "NA").unwrap()
    }

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn well_formed_example_has_empty_report() {
        assert!(validate_example(&ex("a", "located_in"), &schema()).is_valid());
    }

    #[test]
    fn unknown_relation_is_one_violation_naming_label() {
        let report = validate_example(&ex("a", "org:foundedd"), &schema());
        assert_eq!(
            report.violations,
            vec![Violation::UnknownRelation {
                relation: "org:foundedd".into()
            }]
        );
        assert!(report.violations[0].to_string().contains("org:foundedd"));
    }

    #[test]
    fn span_text_mismatch_lists_both_strings() {
        let mut e = ex("a", "located_in");
        e.tail.text = "Pittsburgh, PA".into();
        let report = validate_example(&e, &schema());
        assert_eq!(report.violations.len(), 1);
        let msg = report.violations[0].to_string();
        assert!(msg.contains("Pittsburgh, PA") && msg.contains("`Pittsburgh`"), "{msg}");
    }

    #[test]
    fn validation_does_not_mutate() {
        let e = ex("a", "bogus");
        let before = e.clone();
        let _ = validate_example(&e, &schema());
        assert_eq!(e, before);
    }

    #[test]
    fn empty_file_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "train.jsonl", "");
        let corpus = load_corpus(&p, &LoadOptions::default()).unwrap();
        assert_eq!(corpus.split("train").unwrap().len(), 0);
        assert!(corpus.schema.relations.is_empty());
    }

    #[test]
    fn inverted_span_is_rejected_with_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "train.jsonl",
            r#"{"id":"bad-7","tokens":["a","b","c","d"],"head":{"text":"d","start":3,"end":2},"tail":{"text":"a"},"relation":"r"}"#,
        );
        let err = load_corpus(&p, &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad-7") && msg.contains("start < end"), "{msg}");
    }

    #[test]
    fn malformed_record_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&ex("a", "located_in")).unwrap();
        let p = write_tmp(
            dir.path(),
            "train.jsonl",
            &format!("{good}\n{{\"id\":\"b\",\"tokens\":[\"x\"],\"tail\":{{\"text\":\"x\"}},\"relation\":\"NA\"}}\n"),
        );
        match load_corpus(&p, &LoadOptions::default()).unwrap_err() {
            CorpusError::Malformed { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "head");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_id_and_undeclared_relation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = serde_json::to_string(&ex("a", "located_in")).unwrap();
        let p = write_tmp(dir.path(), "train.jsonl", &format!("{a}\n{a}\n"));
        assert!(matches!(
            load_corpus(&p, &LoadOptions::default()),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));

        let b = serde_json::to_string(&ex("b", "founded_by")).unwrap();
        let p = write_tmp(dir.path(), "dev.jsonl", &format!("{a}\n{b}\n"));
        let opts = LoadOptions {
            relations: Some(vec!["located_in".into()]),
            ..Default::default()
        };
        assert!(matches!(
            load_corpus(&p, &opts),
            Err(CorpusError::UnknownRelation { line: 2, .. })
        ));
    }

    #[test]
    fn tacred_fields_map_to_head_and_tail() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"[{"id":"t1","token":["Bill","Gates","founded","Microsoft","."],
            "subj_start":0,"subj_end":1,"subj_type":"PERSON",
            "obj_start":3,"obj_end":3,"obj_type":"ORGANIZATION","relation":"org:founded_by"},
           {"id":"t2","token":["He","left","."],"subj_start":0,"subj_end":0,"subj_type":"PERSON",
            "obj_start":1,"obj_end":1,"obj_type":"X","relation":"no_relation"}]"#;
        let p = write_tmp(dir.path(), "train.json", body);
        let opts = LoadOptions {
            format: CorpusFormat::TacredJson,
            ..Default::default()
        };
        let corpus = load_corpus(&p, &opts).unwrap();
        let train = corpus.split("train").unwrap();
        assert_eq!(train[0].head.text, "Bill Gates");
        assert_eq!(train[0].head.span, Some((0, 2)));
        assert_eq!(train[0].head.entity_type.as_deref(), Some("PERSON"));
        assert_eq!(train[0].tail.text, "Microsoft");
        assert_eq!(train[1].relation, "NA");
        assert_eq!(corpus.schema.relations, vec!["org:founded_by".to_string()]);
    }

    #[test]
    fn raw_text_records_split_on_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "test.jsonl",
            r#"{"id":"r","text":"MIT  is in\tCambridge","head":{"text":"MIT"},"tail":{"text":"Cambridge"},"relation":"located_in"}"#,
        );
        let corpus = load_corpus(&p, &LoadOptions::default()).unwrap();
        assert_eq!(corpus.split("test").unwrap()[0].tokens, vec!["MIT", "is", "in", "Cambridge"]);
    }

    #[test]
    fn ingest_applies_nfc() {
        let dir = tempfile::tempdir().unwrap();
        // "e" + combining acute accent.
        let p = write_tmp(
            dir.path(),
            "train.jsonl",
            "{\"id\":\"n\",\"tokens\":[\"Caf\\u0065\\u0301\"],\"head\":{\"text\":\"Caf\\u0065\\u0301\"},\"tail\":{\"text\":\"x\"},\"relation\":\"r\"}",
        );
        let corpus = load_corpus(&p, &LoadOptions::default()).unwrap();
        assert_eq!(corpus.split("train").unwrap()[0].head.text, "Caf\u{e9}");
    }

    #[test]
    fn directory_with_schema_file() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(
            dir.path(),
            "schema.json",
            r#"{"relations":["located_in","org:founded"],"na_label":"Other"}"#,
        );
        let a = serde_json::to_string(&ex("a", "located_in")).unwrap();
        let b = serde_json::to_string(&ex("b", "Other")).unwrap();
        write_tmp(dir.path(), "train.jsonl", &format!("{a}\n{b}\n"));
        write_tmp(dir.path(), "test.jsonl", &format!("{b}\n"));
        let corpus = load_corpus(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(corpus.schema.na_label, "Other");
        assert_eq!(corpus.schema.relations.len(), 2);
        assert_eq!(corpus.splits.keys().collect::<Vec<_>>(), vec!["test", "train"]);
    }

    #[test]
    fn schema_rejects_na_inside() {
        assert!(Schema::new(vec!["NA".into()], "NA").is_err());
    }

    #[test]
    fn single_example_stats() {
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), vec![ex("a", "located_in")]);
        let corpus = Corpus { schema: schema(), splits };
        let stats = corpus_stats(&corpus, 5);
        assert_eq!(stats.relation_frequency["train"], BTreeMap::from([("located_in".to_string(), 1)]));
        assert_eq!(stats.split_sizes["train"], 1);
        // located_in has 1 pair, org:founded has 0; both below k=5.
        assert_eq!(stats.relations_below_k_pairs, 2);
    }
}
