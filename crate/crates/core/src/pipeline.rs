//! Recall, audit, retrieve and reason for test examples.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::{Example, Schema};
use crate::lm_backend::{BackendError, GenerationParams, LanguageModel};
use crate::objectives::{MixtureComponent, ObjectiveError, Scorer};
use crate::pair_index::{EntityPair, Grounding, PairIndex};
use crate::prompting::{format_pair_line, parse_entity_pairs, parse_relation, ParseIssue, Templates};

/// Recall output ends at the first blank line.
pub const RECALL_STOP: &str = "\n\n";
/// Generation budget per requested pair line.
pub const TOKENS_PER_PAIR: usize = 64;
pub const REASON_MAX_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Icl,
    MajorityVote,
    Marginal,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "icl" => Ok(Mode::Icl),
            "majority-vote" => Ok(Mode::MajorityVote),
            "marginal" => Ok(Mode::Marginal),
            other => Err(format!("unknown mode `{other}` (expected icl, majority-vote or marginal)")),
        }
    }
}

/// Behavior when no recalled pair grounds to a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    #[default]
    ZeroShot,
    PredictNa,
    Fail,
}

impl std::str::FromStr for FallbackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" => Ok(FallbackPolicy::ZeroShot),
            "predict-na" => Ok(FallbackPolicy::PredictNa),
            "fail" => Ok(FallbackPolicy::Fail),
            other => Err(format!("unknown fallback policy `{other}` (expected zero-shot, predict-na or fail)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("example `{0}`: no demonstrations retrieved and fallback policy is `fail`")]
    NoDemonstrations(String),
    #[error("example `{example_id}`: demonstration `{demo_id}` is not in the index")]
    UnknownDemonstration { example_id: String, demo_id: String },
    #[error("mode `{mode:?}` needs backend capability `{missing}`")]
    Capability { mode: Mode, missing: &'static str },
    #[error("cannot take a majority vote over no demonstrations")]
    EmptyVote,
    #[error("aborted after {consecutive} consecutive failure(s) at example `{example_id}`: {last_error}")]
    Aborted {
        example_id: String,
        consecutive: usize,
        last_error: String,
        /// The last failure came from the backend.
        backend: bool,
        flushed: usize,
    },
    #[error("writing records")]
    Sink(#[from] std::io::Error),
}

impl PipelineError {
    /// The failure originates in the backend service rather than in the inputs.
    pub fn is_backend(&self) -> bool {
        match self {
            PipelineError::Backend(_) => true,
            PipelineError::Objective(ObjectiveError::Backend(_)) => true,
            PipelineError::Aborted { backend, .. } => *backend,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RecallResult {
    pub example_id: String,
    pub raw_output: String,
    pub pairs: Vec<EntityPair>,
    pub parse_issues: Vec<ParseIssue>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidnessBuckets {
    pub pair_grounded: usize,
    pub entities_grounded_pair_not: usize,
    pub one_entity_grounded: usize,
    pub ungrounded: usize,
}

impl ValidnessBuckets {
    pub fn add(&mut self, g: Grounding) {
        match g {
            Grounding::PairGrounded => self.pair_grounded += 1,
            Grounding::EntitiesGroundedPairNot => self.entities_grounded_pair_not += 1,
            Grounding::OneEntityGrounded => self.one_entity_grounded += 1,
            Grounding::Ungrounded => self.ungrounded += 1,
        }
    }

    pub fn merge(&mut self, other: &ValidnessBuckets) {
        self.pair_grounded += other.pair_grounded;
        self.entities_grounded_pair_not += other.entities_grounded_pair_not;
        self.one_entity_grounded += other.one_entity_grounded;
        self.ungrounded += other.ungrounded;
    }

    pub fn total(&self) -> usize {
        self.pair_grounded + self.entities_grounded_pair_not + self.one_entity_grounded + self.ungrounded
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub recall_us: u64,
    pub retrieve_us: u64,
    pub reason_us: u64,
}

fn micros(d: Duration) -> u64 {
    d.as_micros().try_into().unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub recall: RecallResult,
    /// Aligned with `recall.pairs`.
    pub grounding: Vec<Grounding>,
    pub validness: ValidnessBuckets,
    pub demonstrations: Vec<String>,
    /// Grounded pairs whose demonstration was already present.
    pub duplicate_pairs: usize,
    pub empty_retrieval: bool,
    pub mode: Mode,
    pub predicted: String,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason_output: Option<String>,
    /// Wall-clock durations vary between runs and are kept out of the record file.
    #[serde(skip)]
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub mode: Mode,
    pub fallback: FallbackPolicy,
    pub fuzzy_labels: bool,
    pub parallelism: usize,
    /// Consecutive failed examples, in corpus order, that abort a split run.
    pub failure_threshold: usize,
    /// Example id to demonstration ids; bypasses recall for listed examples.
    pub external_demonstrations: Option<HashMap<String, Vec<String>>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 5,
            mode: Mode::Icl,
            fallback: FallbackPolicy::ZeroShot,
            fuzzy_labels: false,
            parallelism: 1,
            failure_threshold: 3,
            external_demonstrations: None,
        }
    }
}

/// Label with the highest count; ties go to the label seen first.
pub fn majority_vote<S: AsRef<str>>(labels: &[S]) -> Result<&str, PipelineError> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for l in labels {
        let c = counts[l.as_ref()];
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((l.as_ref(), c));
        }
    }
    best.map(|(l, _)| l).ok_or(PipelineError::EmptyVote)
}

pub fn recall_pairs(
    backend: &dyn LanguageModel,
    templates: &Templates,
    example: &Example,
    k: usize,
) -> Result<RecallResult, PipelineError> {
    let prompt = templates.render_recall(example, k);
    let params = GenerationParams::greedy(TOKENS_PER_PAIR * k.max(1), &[RECALL_STOP]);
    let generation = backend.generate(&prompt.text, &params)?;
    let parsed = parse_entity_pairs(&generation.text, k);
    Ok(RecallResult {
        example_id: example.id.clone(),
        raw_output: generation.text,
        pairs: parsed.pairs,
        parse_issues: parsed.issues,
    })
}

pub fn audit_validness(recall: &RecallResult, index: &PairIndex) -> (Vec<Grounding>, ValidnessBuckets) {
    let grounding: Vec<Grounding> = recall.pairs.iter().map(|p| index.classify(p)).collect();
    let mut buckets = ValidnessBuckets::default();
    for &g in &grounding {
        buckets.add(g);
    }
    (grounding, buckets)
}

/// Checks that `backend` can serve `mode`.
pub fn check_capabilities(backend: &dyn LanguageModel, mode: Mode) -> Result<(), PipelineError> {
    let caps = backend.capabilities();
    if !caps.generate {
        return Err(PipelineError::Capability { mode, missing: "generate" });
    }
    if mode == Mode::Marginal && !caps.score {
        return Err(PipelineError::Capability { mode, missing: "score" });
    }
    Ok(())
}

/// Runs one example. The backend is addressed with the example's recall prompt
/// at `k = cfg.k`; retrieval keeps the first corpus example per grounded pair.
pub fn run_example(
    backend: &dyn LanguageModel,
    index: &PairIndex,
    templates: &Templates,
    schema: &Schema,
    example: &Example,
    cfg: &PipelineConfig,
) -> Result<PredictionRecord, PipelineError> {
    let mut timing = Timing::default();

    let started = Instant::now();
    let external = cfg
        .external_demonstrations
        .as_ref()
        .and_then(|m| m.get(&example.id));
    let recall = match external {
        Some(_) => RecallResult {
            example_id: example.id.clone(),
            ..Default::default()
        },
        None => recall_pairs(backend, templates, example, cfg.k)?,
    };
    timing.recall_us = micros(started.elapsed());

    let started = Instant::now();
    let (grounding, validness) = audit_validness(&recall, index);
    let mut demos: Vec<&Example> = Vec::new();
    // Pair that first retrieved each demonstration, for mixture priors.
    let mut demo_pairs: Vec<&EntityPair> = Vec::new();
    let mut duplicate_pairs = 0;
    match external {
        Some(ids) => {
            let mut seen = HashSet::new();
            for id in ids {
                let d = index.example(id).ok_or_else(|| PipelineError::UnknownDemonstration {
                    example_id: example.id.clone(),
                    demo_id: id.clone(),
                })?;
                if seen.insert(id.as_str()) {
                    demos.push(d);
                } else {
                    duplicate_pairs += 1;
                }
            }
        }
        None => {
            let mut seen = HashSet::new();
            for (pair, g) in recall.pairs.iter().zip(&grounding) {
                if *g != Grounding::PairGrounded {
                    continue;
                }
                let Some(d) = index.first_match(pair) else { continue };
                if seen.insert(d.id.as_str()) {
                    demos.push(d);
                    demo_pairs.push(pair);
                } else {
                    duplicate_pairs += 1;
                }
            }
            if duplicate_pairs > 0 {
                warn!(example = %example.id, duplicate_pairs, "recalled pairs retrieved the same demonstration");
            }
        }
    }
    timing.retrieve_us = micros(started.elapsed());

    let started = Instant::now();
    let empty_retrieval = demos.is_empty();
    let (predicted, parse_ok, reason_output) = if empty_retrieval {
        match cfg.fallback {
            FallbackPolicy::ZeroShot => icl_predict(backend, templates, schema, example, &[], cfg.fuzzy_labels)?,
            FallbackPolicy::PredictNa => (schema.na_label.clone(), true, None),
            FallbackPolicy::Fail => return Err(PipelineError::NoDemonstrations(example.id.clone())),
        }
    } else {
        match cfg.mode {
            Mode::Icl => icl_predict(backend, templates, schema, example, &demos, cfg.fuzzy_labels)?,
            Mode::MajorityVote => {
                let labels: Vec<&str> = demos.iter().map(|d| d.relation.as_str()).collect();
                (majority_vote(&labels)?.to_string(), true, None)
            }
            Mode::Marginal => {
                let labels = schema.all_labels();
                let components = if demo_pairs.len() == demos.len() {
                    let prompt = templates.render_recall(example, cfg.k);
                    demos
                        .iter()
                        .zip(&demo_pairs)
                        .map(|(d, p)| {
                            let line = format_pair_line(&p.head, &p.tail);
                            Ok(MixtureComponent {
                                pair: p.key(index.norm()),
                                prior_logprob: backend.score(&prompt.text, &line)?.sum(),
                                demo: d,
                            })
                        })
                        .collect::<Result<Vec<_>, BackendError>>()?
                } else {
                    // External demonstrations carry no generation prior.
                    demos
                        .iter()
                        .map(|d| MixtureComponent {
                            pair: d.pair_key(index.norm()),
                            prior_logprob: 0.0,
                            demo: d,
                        })
                        .collect()
                };
                let dist = Scorer::new(backend, templates).marginal_relation_scores(example, &components, &labels)?;
                let label = dist.argmax().unwrap_or(&schema.na_label).to_string();
                (label, true, None)
            }
        }
    };
    timing.reason_us = micros(started.elapsed());

    Ok(PredictionRecord {
        example_id: example.id.clone(),
        recall,
        grounding,
        validness,
        demonstrations: demos.iter().map(|d| d.id.clone()).collect(),
        duplicate_pairs,
        empty_retrieval,
        mode: cfg.mode,
        predicted,
        parse_ok,
        reason_output,
        timing,
    })
}

fn icl_predict(
    backend: &dyn LanguageModel,
    templates: &Templates,
    schema: &Schema,
    example: &Example,
    demos: &[&Example],
    fuzzy: bool,
) -> Result<(String, bool, Option<String>), PipelineError> {
    let prompt = templates.render_reason(example, demos);
    let generation = backend.generate(&prompt.text, &GenerationParams::greedy(REASON_MAX_TOKENS, &["\n"]))?;
    let parsed = parse_relation(&generation.text, schema, fuzzy);
    Ok((parsed.label, parsed.parse_ok, Some(generation.text)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedExample {
    pub example_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub examples: usize,
    pub records: usize,
    pub failed: Vec<FailedExample>,
    pub validness: ValidnessBuckets,
}

/// Runs every example and hands records to `sink` in input order, whatever
/// order workers finish in. Failed examples produce no record; the run aborts
/// once `cfg.failure_threshold` consecutive examples (in input order) fail.
pub fn run_split<F>(
    backend: &dyn LanguageModel,
    index: &PairIndex,
    templates: &Templates,
    schema: &Schema,
    examples: &[Example],
    cfg: &PipelineConfig,
    mut sink: F,
) -> Result<SplitSummary, PipelineError>
where
    F: FnMut(&PredictionRecord) -> std::io::Result<()>,
{
    check_capabilities(backend, cfg.mode)?;
    let n = examples.len();
    let workers = cfg.parallelism.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut summary = SplitSummary {
        examples: n,
        ..Default::default()
    };

    thread::scope(|scope| -> Result<(), PipelineError> {
        let (tx, rx) = mpsc::channel::<(usize, Result<PredictionRecord, PipelineError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = run_example(backend, index, templates, schema, &examples[i], cfg);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut expected = 0;
        let mut consecutive = 0;
        let outcome = (|| {
            for (i, result) in &rx {
                pending.insert(i, result);
                while let Some(result) = pending.remove(&expected) {
                    let id = &examples[expected].id;
                    expected += 1;
                    match result {
                        Ok(record) => {
                            consecutive = 0;
                            sink(&record)?;
                            summary.records += 1;
                            summary.validness.merge(&record.validness);
                        }
                        Err(e) => {
                            consecutive += 1;
                            warn!(example = %id, error = %e, "example failed");
                            let message = e.to_string();
                            let backend = e.is_backend();
                            summary.failed.push(FailedExample {
                                example_id: id.clone(),
                                error: message.clone(),
                            });
                            if consecutive >= cfg.failure_threshold.max(1) {
                                return Err(PipelineError::Aborted {
                                    example_id: id.clone(),
                                    consecutive,
                                    last_error: message,
                                    backend,
                                    flushed: summary.records,
                                });
                            }
                        }
                    }
                    if expected % 100 == 0 {
                        info!(done = expected, total = n, failed = summary.failed.len(), "progress");
                    }
                }
            }
            Ok(())
        })();
        if outcome.is_err() {
            stop.store(true, Ordering::Relaxed);
        }
        drop(rx);
        outcome
    })?;
    Ok(summary)
}
