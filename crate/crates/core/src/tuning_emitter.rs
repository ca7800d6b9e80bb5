//! Instruction-tuning data for the recall and reason tasks.
//!
//! Both tasks draw an example's supervision pairs from the same stream
//! `(seed, "supervision", example id)`, so the two files agree on which pairs
//! each example was trained against. Noise decisions use `(seed, "noise", id)`.

use std::io::{self, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Example;
use crate::pair_index::{PairIndex, PairKey};
use crate::prompting::{format_pair_lines, Templates};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Recall,
    Reason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningMeta {
    pub k: usize,
    /// Distractors injected; always 0 for recall.
    pub k_star: usize,
    pub noised: bool,
    pub seed: u64,
    pub template_version: String,
    /// Fewer than `k` supervision pairs were available.
    pub shortfall: bool,
    pub pairs: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demonstration_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractor_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningInstance {
    pub task: Task,
    pub example_id: String,
    pub prompt: String,
    pub completion: String,
    pub meta: TuningMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability that an instance is noised. `k*` is then uniform over
    /// `1..=n` with `n` the number of demonstrations.
    pub p_noise: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p_noise: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitConfig {
    pub k: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for EmitConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

/// Why an example produced no instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub example_id: String,
    pub reason: String,
}

pub type Emitted = Result<TuningInstance, Skip>;

fn supervision(index: &PairIndex, example: &Example, cfg: &EmitConfig) -> Result<(Vec<PairKey>, bool), Skip> {
    let mut stream = rng::stream(cfg.seed, "supervision", &example.id);
    let sample = index.sample_supervision_pairs(example, cfg.k, &mut stream);
    if sample.pairs.is_empty() {
        return Err(Skip {
            example_id: example.id.clone(),
            reason: format!("relation `{}` has no other entity pair", example.relation),
        });
    }
    Ok((sample.pairs, sample.shortfall))
}

fn base_meta(cfg: &EmitConfig, templates: &Templates, pairs: &[PairKey], shortfall: bool) -> TuningMeta {
    TuningMeta {
        k: cfg.k,
        k_star: 0,
        noised: false,
        seed: cfg.seed,
        template_version: templates.version.clone(),
        shortfall,
        pairs: pairs.iter().map(|p| [p.head.clone(), p.tail.clone()]).collect(),
        demonstration_ids: Vec::new(),
        distractor_slots: Vec::new(),
    }
}

/// Recall instance: the prompt asks for `|Z*|` pairs and the completion lists them.
pub fn recall_instance(index: &PairIndex, templates: &Templates, example: &Example, cfg: &EmitConfig) -> Emitted {
    let (pairs, shortfall) = supervision(index, example, cfg)?;
    let prompt = templates.render_recall(example, pairs.len()).text;
    let completion = format_pair_lines(pairs.iter().map(|p| (p.head.as_str(), p.tail.as_str())));
    Ok(TuningInstance {
        task: Task::Recall,
        example_id: example.id.clone(),
        prompt,
        completion,
        meta: base_meta(cfg, templates, &pairs, shortfall),
    })
}

/// Reason instance: one demonstration per supervision pair (its first example in
/// corpus order), possibly with `k*` slots replaced by different-relation examples.
pub fn reason_instance(index: &PairIndex, templates: &Templates, example: &Example, cfg: &EmitConfig) -> Emitted {
    let (pairs, shortfall) = supervision(index, example, cfg)?;
    let mut demos: Vec<&Example> = pairs
        .iter()
        .filter_map(|p| {
            // A pair may be shared across relations; supervision keeps the gold one.
            index.retrieve_key(p).into_iter().find(|d| d.relation == example.relation)
        })
        .collect();
    let n = demos.len();

    let mut noise = rng::stream(cfg.seed, "noise", &example.id);
    let mut slots = Vec::new();
    if n > 0 && noise.random_bool(cfg.noise.p_noise.clamp(0.0, 1.0)) {
        let k_star = noise.random_range(1..=n);
        let mut chosen = index::sample(&mut noise, n, k_star).into_vec();
        chosen.sort_unstable();
        // With a single relation in the split there is nothing to inject.
        if let Ok(sample) = index.sample_distractors(&example.relation, k_star, &mut noise) {
            for (&slot, d) in chosen.iter().zip(sample.examples) {
                demos[slot] = d;
            }
            slots = chosen;
        }
    }

    let prompt = templates.render_reason(example, &demos).text;
    let mut meta = base_meta(cfg, templates, &pairs, shortfall);
    meta.k_star = slots.len();
    meta.noised = !slots.is_empty();
    meta.demonstration_ids = demos.iter().map(|d| d.id.clone()).collect();
    meta.distractor_slots = slots;
    Ok(TuningInstance {
        task: Task::Reason,
        example_id: example.id.clone(),
        prompt,
        completion: example.relation.clone(),
        meta,
    })
}

/// Lazily yields one result per indexed example, in corpus order.
pub fn instances<'a>(
    task: Task,
    index: &'a PairIndex,
    templates: &'a Templates,
    cfg: &'a EmitConfig,
) -> impl Iterator<Item = Emitted> + 'a {
    index.examples().iter().map(move |e| match task {
        Task::Recall => recall_instance(index, templates, e, cfg),
        Task::Reason => reason_instance(index, templates, e, cfg),
    })
}

/// Counts for one emitted file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub instances: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    pub shortfall: usize,
    pub noised: usize,
    /// Indexed by `k*`.
    pub k_star_histogram: Vec<usize>,
    pub sha256: String,
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Streams a task's instances as JSON lines, one per eligible example.
pub fn write_task<W: Write>(
    task: Task,
    index: &PairIndex,
    templates: &Templates,
    cfg: &EmitConfig,
    out: W,
) -> io::Result<TaskSummary> {
    let mut out = HashingWriter {
        inner: out,
        hasher: Sha256::new(),
    };
    let mut summary = TaskSummary {
        k_star_histogram: vec![0; cfg.k + 1],
        ..Default::default()
    };
    for item in instances(task, index, templates, cfg) {
        match item {
            Ok(inst) => {
                serde_json::to_writer(&mut out, &inst)?;
                out.write_all(b"\n")?;
                summary.instances += 1;
                summary.shortfall += usize::from(inst.meta.shortfall);
                summary.noised += usize::from(inst.meta.noised);
                if let Some(slot) = summary.k_star_histogram.get_mut(inst.meta.k_star) {
                    *slot += 1;
                }
            }
            Err(skip) => {
                summary.skipped += 1;
                summary.skipped_ids.push(skip.example_id);
            }
        }
    }
    out.flush()?;
    summary.sha256 = hex::encode(out.hasher.finalize());
    Ok(summary)
}

/// Describes an emitted pair of tuning files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningManifest {
    pub split: String,
    pub source_fingerprint: String,
    pub examples: usize,
    pub k: usize,
    pub seed: u64,
    pub template_version: String,
    pub noise: NoiseConfig,
    pub recall_file: String,
    pub reason_file: String,
    pub recall: TaskSummary,
    pub reason: TaskSummary,
}

/// Adapter hyperparameters handed to the external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub rank: u32,
    pub alpha: u32,
    pub epochs: u32,
    pub batch_size: u32,
    pub lr: f64,
    pub k: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32,
            epochs: 5,
            batch_size: 4,
            lr: 1e-4,
            k: 5,
        }
    }
}

impl TrainingConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}
