//! Metrics and reports over prediction records.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::pair_index::PairIndex;
use crate::pipeline::{PredictionRecord, ValidnessBuckets};
use crate::rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("position {position}: gold id `{gold}` does not match prediction id `{pred}`")]
    IdMismatch { position: usize, gold: String, pred: String },
    #[error("no gold label for example `{0}`")]
    MissingGold(String),
    #[error("no prediction for example `{0}`")]
    MissingPrediction(String),
    #[error("duplicate prediction for example `{0}`")]
    DuplicatePrediction(String),
    #[error("demonstration `{0}` is not in the index")]
    UnknownDemonstration(String),
    #[error("example `{id}` has {count} demonstrations, more than k={k}")]
    TooManyDemonstrations { id: String, count: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labeled<'a> {
    pub id: &'a str,
    pub label: &'a str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub predicted_non_na: usize,
    pub gold_non_na: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub parse_failure_count: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

impl MetricsReport {
    pub fn from_counts(counts: Counts, parse_failure_count: usize) -> Self {
        let precision = ratio(counts.tp, counts.predicted_non_na);
        let recall = ratio(counts.tp, counts.gold_non_na);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            counts,
            parse_failure_count,
        }
    }
}

/// Micro-averaged precision, recall and F1 with `na_label` excluded from both
/// denominators. Lists are aligned by position and must agree on ids.
pub fn micro_f1(gold: &[Labeled<'_>], pred: &[Labeled<'_>], na_label: &str) -> Result<MetricsReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut c = Counts::default();
    for (position, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.id != p.id {
            return Err(EvalError::IdMismatch {
                position,
                gold: g.id.to_string(),
                pred: p.id.to_string(),
            });
        }
        let g_pos = g.label != na_label;
        let p_pos = p.label != na_label;
        c.gold_non_na += usize::from(g_pos);
        c.predicted_non_na += usize::from(p_pos);
        c.tp += usize::from(g_pos && p_pos && g.label == p.label);
    }
    Ok(MetricsReport::from_counts(c, 0))
}

/// Scores records against the gold split. Every gold example needs exactly one
/// record; records are matched by id, not position.
pub fn evaluate_records(
    gold: &[Example],
    records: &[PredictionRecord],
    na_label: &str,
) -> Result<MetricsReport, EvalError> {
    let by_id = records_by_id(records)?;
    let gold_ids: HashSet<&str> = gold.iter().map(|e| e.id.as_str()).collect();
    if let Some(r) = records.iter().find(|r| !gold_ids.contains(r.example_id.as_str())) {
        return Err(EvalError::MissingGold(r.example_id.clone()));
    }
    let mut g = Vec::with_capacity(gold.len());
    let mut p = Vec::with_capacity(gold.len());
    let mut parse_failures = 0;
    for e in gold {
        let r = by_id
            .get(e.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(e.id.clone()))?;
        parse_failures += usize::from(!r.parse_ok);
        g.push(Labeled { id: &e.id, label: &e.relation });
        p.push(Labeled { id: &r.example_id, label: &r.predicted });
    }
    let mut report = micro_f1(&g, &p, na_label)?;
    report.parse_failure_count = parse_failures;
    Ok(report)
}

fn records_by_id(records: &[PredictionRecord]) -> Result<HashMap<&str, &PredictionRecord>, EvalError> {
    let mut by_id = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.example_id.as_str(), r).is_some() {
            return Err(EvalError::DuplicatePrediction(r.example_id.clone()));
        }
    }
    Ok(by_id)
}

fn gold_map(gold: &[Example]) -> HashMap<&str, &str> {
    gold.iter().map(|e| (e.id.as_str(), e.relation.as_str())).collect()
}

/// `n / d` as a percentage with two decimals, e.g. `95.86%`.
pub fn format_percent(n: usize, d: usize) -> String {
    format!("{:.2}%", 100.0 * ratio(n, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidnessReport {
    pub records: usize,
    pub buckets: ValidnessBuckets,
    pub generated: usize,
    pub valid: usize,
    pub ratio: f64,
    pub ratio_percent: String,
}

impl ValidnessReport {
    pub fn from_buckets(records: usize, buckets: ValidnessBuckets) -> Self {
        let generated = buckets.total();
        let valid = buckets.pair_grounded;
        Self {
            records,
            buckets,
            generated,
            valid,
            ratio: ratio(valid, generated),
            ratio_percent: format_percent(valid, generated),
        }
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("records", self.records.to_string()),
            ("generated pairs", self.generated.to_string()),
            ("valid pairs", self.valid.to_string()),
            ("ratio", self.ratio_percent.clone()),
            ("entities grounded, pair not", self.buckets.entities_grounded_pair_not.to_string()),
            ("one entity grounded", self.buckets.one_entity_grounded.to_string()),
            ("ungrounded", self.buckets.ungrounded.to_string()),
        ];
        two_column(&rows)
    }
}

fn two_column(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<w$}  {v:>10}");
    }
    out
}

pub fn validness_report(records: &[PredictionRecord]) -> ValidnessReport {
    let mut buckets = ValidnessBuckets::default();
    for r in records {
        buckets.merge(&r.validness);
    }
    ValidnessReport::from_buckets(records.len(), buckets)
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        two_column(&[
            ("precision", format!("{:.4}", self.precision)),
            ("recall", format!("{:.4}", self.recall)),
            ("f1", format!("{:.4}", self.f1)),
            ("true positives", self.counts.tp.to_string()),
            ("predicted non-NA", self.counts.predicted_non_na.to_string()),
            ("gold non-NA", self.counts.gold_non_na.to_string()),
            ("parse failures", self.parse_failure_count.to_string()),
        ])
    }
}

/// Records bucketed by how many of their demonstrations share the gold relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceHistogram {
    pub k: usize,
    /// Indexed by same-relation count, `0..=k`.
    pub buckets: Vec<usize>,
    pub proportions: Vec<f64>,
    pub total: usize,
    /// Records with fewer than `k` demonstrations; they are still bucketed by count.
    pub shortfall: usize,
}

impl RelevanceHistogram {
    /// Proportions from bucket `k` down to 0.
    pub fn to_table(&self, label: &str) -> String {
        let mut header = format!("{:<10}", "");
        let mut row = format!("{label:<10}");
        for b in (0..=self.k).rev() {
            let _ = write!(header, " {b:>8}");
            let _ = write!(row, " {:>8}", format_percent(self.buckets[b], self.total));
        }
        format!("{header}\n{row}\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count,proportion\n");
        for b in (0..=self.k).rev() {
            let _ = writeln!(out, "{b},{},{}", self.buckets[b], self.proportions[b]);
        }
        out
    }
}

fn same_relation_count(
    record: &PredictionRecord,
    gold: &str,
    index: &PairIndex,
) -> Result<usize, EvalError> {
    let mut n = 0;
    for id in &record.demonstrations {
        let d = index
            .example(id)
            .ok_or_else(|| EvalError::UnknownDemonstration(id.clone()))?;
        n += usize::from(d.relation == gold);
    }
    Ok(n)
}

pub fn relevance_histogram(
    records: &[PredictionRecord],
    gold: &[Example],
    index: &PairIndex,
    k: usize,
) -> Result<RelevanceHistogram, EvalError> {
    let gold = gold_map(gold);
    let mut buckets = vec![0; k + 1];
    let mut shortfall = 0;
    for r in records {
        let g = gold
            .get(r.example_id.as_str())
            .ok_or_else(|| EvalError::MissingGold(r.example_id.clone()))?;
        if r.demonstrations.len() > k {
            return Err(EvalError::TooManyDemonstrations {
                id: r.example_id.clone(),
                count: r.demonstrations.len(),
                k,
            });
        }
        shortfall += usize::from(r.demonstrations.len() < k);
        buckets[same_relation_count(r, g, index)?] += 1;
    }
    let total = records.len();
    Ok(RelevanceHistogram {
        k,
        proportions: buckets.iter().map(|&b| ratio(b, total)).collect(),
        buckets,
        total,
        shortfall,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub example_id: String,
    pub original: Vec<String>,
    pub replaced: Vec<String>,
    /// Positions kept because their relation has no other example.
    pub kept: Vec<usize>,
}

/// Swaps every demonstration for a different training example of the same
/// relation, drawn uniformly from stream `(seed, "sensitivity", example id)`.
pub fn sensitivity_replace(
    records: &[PredictionRecord],
    index: &PairIndex,
    seed: u64,
) -> Result<Vec<Replacement>, EvalError> {
    records
        .iter()
        .map(|r| {
            let mut stream = rng::stream(seed, "sensitivity", &r.example_id);
            let mut replaced = Vec::with_capacity(r.demonstrations.len());
            let mut kept = Vec::new();
            for (i, id) in r.demonstrations.iter().enumerate() {
                if index.example(id).is_none() {
                    return Err(EvalError::UnknownDemonstration(id.clone()));
                }
                match index.sample_same_relation_alternative(id, &mut stream) {
                    Some(alt) => replaced.push(alt.id.clone()),
                    None => {
                        kept.push(i);
                        replaced.push(id.clone());
                    }
                }
            }
            Ok(Replacement {
                example_id: r.example_id.clone(),
                original: r.demonstrations.clone(),
                replaced,
                kept,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenContextPartition {
    /// At least one demonstration shares the gold relation.
    pub with_gold: Vec<String>,
    pub without_gold: Vec<String>,
    pub metrics_with_gold: MetricsReport,
    pub metrics_without_gold: MetricsReport,
}

pub fn golden_context_partition(
    records: &[PredictionRecord],
    gold: &[Example],
    index: &PairIndex,
    na_label: &str,
) -> Result<GoldenContextPartition, EvalError> {
    let gold = gold_map(gold);
    let mut parts: [(Vec<String>, Counts, usize); 2] = Default::default();
    for r in records {
        let g = *gold
            .get(r.example_id.as_str())
            .ok_or_else(|| EvalError::MissingGold(r.example_id.clone()))?;
        let side = usize::from(same_relation_count(r, g, index)? == 0);
        let (ids, c, parse_failures) = &mut parts[side];
        ids.push(r.example_id.clone());
        let g_pos = g != na_label;
        let p_pos = r.predicted != na_label;
        c.gold_non_na += usize::from(g_pos);
        c.predicted_non_na += usize::from(p_pos);
        c.tp += usize::from(g_pos && p_pos && g == r.predicted);
        *parse_failures += usize::from(!r.parse_ok);
    }
    let [(with_gold, c1, f1), (without_gold, c2, f2)] = parts;
    Ok(GoldenContextPartition {
        with_gold,
        without_gold,
        metrics_with_gold: MetricsReport::from_counts(c1, f1),
        metrics_without_gold: MetricsReport::from_counts(c2, f2),
    })
}
