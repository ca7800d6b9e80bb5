use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groundre::corpus::{corpus_stats, fingerprint, load_corpus, write_jsonl, Corpus, Example, LoadOptions};
use groundre::evaluation::{
    evaluate_records, golden_context_partition, relevance_histogram, sensitivity_replace, validness_report,
    MetricsReport, ValidnessReport,
};
use groundre::lm_backend::{open_backend, BackendDescriptor, BackendHandle};
use groundre::objectives::{LossReport, Scorer};
use groundre::pair_index::{build_index, NormConfig, PairIndex};
use groundre::pipeline::{audit_validness, run_split, PipelineConfig, PredictionRecord, SplitSummary, ValidnessBuckets};
use groundre::prompting::Templates;
use groundre::tuning_emitter::{
    reason_instance, write_task, EmitConfig, NoiseConfig, Task, TrainingConfig, TuningManifest,
};
use serde::Serialize;
use serde_json::json;
use tracing::info;

use crate::config::RunConfig;
use crate::output::{write_atomic, write_json_atomic, write_jsonl_atomic, RunManifest, StagedFile};

/// Machine-readable result on stdout.
fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

struct Inputs {
    corpus: Corpus,
    templates: Templates,
}

fn load_inputs(cfg: &RunConfig, manifest: Option<&mut RunManifest>) -> Result<Inputs> {
    let path = cfg.corpus_path()?;
    let opts = LoadOptions {
        format: cfg.format,
        na_label: cfg.na_label.clone(),
        relations: None,
    };
    let corpus = load_corpus(path, &opts)?;
    let templates = load_templates(cfg)?;
    if let Some(m) = manifest {
        m.input("corpus", path)?;
        if let Some(t) = &cfg.templates {
            m.input("templates", t)?;
        }
        m.template_version = templates.version.clone();
    }
    Ok(Inputs { corpus, templates })
}

fn load_templates(cfg: &RunConfig) -> Result<Templates> {
    Ok(match &cfg.templates {
        Some(dir) => Templates::load_dir(dir)?,
        None => Templates::default(),
    })
}

fn norm(cfg: &RunConfig) -> NormConfig {
    NormConfig {
        case_fold: cfg.case_fold,
    }
}

fn load_index(cfg: &RunConfig, corpus: &Corpus, manifest: Option<&mut RunManifest>) -> Result<PairIndex> {
    match &cfg.index {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading index {}", path.display()))?;
            let index = PairIndex::from_json(&text, corpus).with_context(|| format!("loading index {}", path.display()))?;
            if let Some(m) = manifest {
                m.input("index", path)?;
            }
            Ok(index)
        }
        None => Ok(build_index(corpus, &cfg.index_split, norm(cfg))?),
    }
}

fn open(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<BackendHandle> {
    let desc = BackendDescriptor::parse(cfg.backend_source()?, cfg.model.as_deref());
    if let BackendDescriptor::Scripted { path } = &desc {
        manifest.input("backend", path)?;
    }
    let backend = open_backend(&desc, cfg.parallelism)?;
    manifest.backend = Some(backend.describe());
    Ok(backend)
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [Example]> {
    corpus.split(name).with_context(|| {
        let known: Vec<&str> = corpus.splits.keys().map(String::as_str).collect();
        format!("corpus has no split `{name}` (available: {})", known.join(", "))
    })
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir("ingest");
    let mut manifest = RunManifest::new("ingest", cfg, &load_templates(cfg)?.version);
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let mut splits = BTreeMap::new();
    for (name, examples) in &inputs.corpus.splits {
        let mut f = StagedFile::create(&out.join(format!("{name}.jsonl")))?;
        write_jsonl(&mut f, examples)?;
        manifest.outputs.push(f.commit()?);
        splits.insert(name.clone(), json!({"examples": examples.len(), "fingerprint": fingerprint(examples)}));
    }
    let schema_path = out.join("schema.json");
    write_json_atomic(&schema_path, &inputs.corpus.schema)?;
    manifest.outputs.push(schema_path);
    manifest.write(&out)?;
    emit(&json!({"schema": inputs.corpus.schema, "splits": splits, "out": out}))
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir("index");
    let mut manifest = RunManifest::new("index", cfg, &load_templates(cfg)?.version);
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = build_index(&inputs.corpus, &cfg.index_split, norm(cfg))?;
    let path = out.join("index.json");
    write_atomic(&path, index.to_json().as_bytes())?;
    manifest.outputs.push(path.clone());
    manifest.write(&out)?;
    emit(&json!({
        "index": path,
        "split": index.split(),
        "examples": index.len(),
        "pairs": index.pair_count(),
        "source_fingerprint": index.source_fingerprint(),
    }))
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg, None)?;
    emit(&corpus_stats(&inputs.corpus, cfg.k))
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub rank: Option<u32>,
    #[arg(long)]
    pub alpha: Option<u32>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn emit_tuning(cfg: &RunConfig, training: &TrainingArgs) -> Result<()> {
    let out = cfg.out_dir("emit-tuning");
    let mut manifest = RunManifest::new("emit-tuning", cfg, "");
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = load_index(cfg, &inputs.corpus, Some(&mut manifest))?;
    let emit_cfg = EmitConfig {
        k: cfg.k,
        seed: cfg.seed,
        noise: NoiseConfig { p_noise: cfg.p_noise },
    };

    let mut summaries = Vec::new();
    for (task, name) in [(Task::Recall, "recall.jsonl"), (Task::Reason, "reason.jsonl")] {
        let mut f = StagedFile::create(&out.join(name))?;
        let summary = write_task(task, &index, &inputs.templates, &emit_cfg, &mut f)?;
        manifest.outputs.push(f.commit()?);
        summaries.push(summary);
    }
    let reason = summaries.pop().expect("two tasks");
    let recall = summaries.pop().expect("two tasks");
    let tuning = TuningManifest {
        split: index.split().to_string(),
        source_fingerprint: index.source_fingerprint().to_string(),
        examples: index.len(),
        k: cfg.k,
        seed: cfg.seed,
        template_version: inputs.templates.version.clone(),
        noise: emit_cfg.noise,
        recall_file: "recall.jsonl".into(),
        reason_file: "reason.jsonl".into(),
        recall,
        reason,
    };
    let defaults = TrainingConfig::default();
    let training = TrainingConfig {
        rank: training.rank.unwrap_or(defaults.rank),
        alpha: training.alpha.unwrap_or(defaults.alpha),
        epochs: training.epochs.unwrap_or(defaults.epochs),
        batch_size: training.batch_size.unwrap_or(defaults.batch_size),
        lr: training.lr.unwrap_or(defaults.lr),
        k: cfg.k,
    };
    for (name, value) in [
        ("manifest.json", serde_json::to_value(&tuning)?),
        ("training_config.json", serde_json::to_value(&training)?),
    ] {
        let path = out.join(name);
        write_json_atomic(&path, &value)?;
        manifest.outputs.push(path);
    }
    manifest.write(&out)?;
    emit(&tuning)
}

fn pipeline_config(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        k: cfg.k,
        mode: cfg.mode,
        fallback: cfg.fallback,
        fuzzy_labels: cfg.fuzzy_labels,
        parallelism: cfg.parallelism,
        failure_threshold: cfg.failure_threshold,
        external_demonstrations: None,
    }
}

/// Streams records to `<out>/<name>`; an aborted run keeps what was written as
/// `<name stem>.partial.jsonl` and a complete run also writes per-record timings.
#[allow(clippy::too_many_arguments)]
fn run_to_file(
    backend: &BackendHandle,
    inputs: &Inputs,
    index: &PairIndex,
    examples: &[Example],
    pcfg: &PipelineConfig,
    out: &Path,
    name: &str,
    manifest: &mut RunManifest,
) -> Result<(SplitSummary, Vec<PredictionRecord>)> {
    let dest = out.join(name);
    let mut file = StagedFile::create(&dest)?;
    let mut timings = StagedFile::create(&out.join("timings.jsonl"))?;
    let mut records = Vec::new();
    let result = run_split(backend.as_ref(), index, &inputs.templates, &inputs.corpus.schema, examples, pcfg, |r| {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
        serde_json::to_writer(&mut timings, &json!({"example_id": r.example_id, "timing": r.timing}))?;
        timings.write_all(b"\n")?;
        records.push(r.clone());
        Ok(())
    });
    match result {
        Ok(summary) => {
            manifest.outputs.push(file.commit()?);
            manifest.outputs.push(timings.commit()?);
            Ok((summary, records))
        }
        Err(e) => {
            let partial = dest.with_extension("partial.jsonl");
            file.commit_as(&partial)?;
            Err(e).with_context(|| format!("records written before the failure are in {}", partial.display()))
        }
    }
}

pub fn predict(cfg: &RunConfig, demonstrations: Option<&Path>) -> Result<()> {
    let out = cfg.out_dir("predict");
    let mut manifest = RunManifest::new("predict", cfg, "");
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = load_index(cfg, &inputs.corpus, Some(&mut manifest))?;
    let backend = open(cfg, &mut manifest)?;
    let mut pcfg = pipeline_config(cfg);
    if let Some(path) = demonstrations {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let map: HashMap<String, Vec<String>> =
            serde_json::from_str(&text).with_context(|| format!("parsing demonstrations {}", path.display()))?;
        manifest.input("demonstrations", path)?;
        pcfg.external_demonstrations = Some(map);
    }
    let examples = split(&inputs.corpus, &cfg.split)?;
    info!(examples = examples.len(), mode = ?cfg.mode, "predicting");
    let (summary, _) = run_to_file(&backend, &inputs, &index, examples, &pcfg, &out, "predictions.jsonl", &mut manifest)?;
    let summary_path = out.join("summary.json");
    write_json_atomic(&summary_path, &summary)?;
    manifest.outputs.push(summary_path);
    manifest.write(&out)?;
    emit(&json!({"summary": summary, "predictions": out.join("predictions.jsonl")}))
}

/// Recall and audit only: the pipeline's majority-vote mode with NA fallback
/// never reasons, so only generation is exercised.
pub fn recall(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir("recall");
    let mut manifest = RunManifest::new("recall", cfg, "");
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = load_index(cfg, &inputs.corpus, Some(&mut manifest))?;
    let backend = open(cfg, &mut manifest)?;
    let pcfg = PipelineConfig {
        mode: groundre::pipeline::Mode::MajorityVote,
        fallback: groundre::pipeline::FallbackPolicy::PredictNa,
        ..pipeline_config(cfg)
    };
    let examples = split(&inputs.corpus, &cfg.split)?;
    let mut rows = Vec::new();
    let summary = run_split(backend.as_ref(), &index, &inputs.templates, &inputs.corpus.schema, examples, &pcfg, |r| {
        rows.push(json!({
            "example_id": r.example_id,
            "raw_output": r.recall.raw_output,
            "pairs": r.recall.pairs,
            "parse_issues": r.recall.parse_issues,
            "grounding": r.grounding,
            "validness": r.validness,
        }));
        Ok(())
    })?;
    manifest.outputs.push(write_jsonl_atomic(&out.join("recall.jsonl"), &rows)?);
    let report = ValidnessReport::from_buckets(summary.records, summary.validness);
    manifest.outputs.push(write_json_atomic(&out.join("validness.json"), &report)?);
    manifest.write(&out)?;
    emit(&json!({"validness": report, "failed": summary.failed}))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading predictions {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}: malformed prediction record", path.display(), i + 1))
        })
        .collect()
}

fn gold_examples(cfg: &RunConfig, gold: Option<&Path>, corpus: Option<&Corpus>) -> Result<(Vec<Example>, String)> {
    if let Some(path) = gold {
        let opts = LoadOptions {
            format: cfg.format,
            na_label: cfg.na_label.clone(),
            relations: None,
        };
        let c = load_corpus(path, &opts)?;
        let na = c.schema.na_label.clone();
        let mut splits = c.splits.into_values();
        match (splits.next(), splits.next()) {
            (Some(only), None) => return Ok((only, na)),
            _ => bail!("gold file {} must hold exactly one split", path.display()),
        }
    }
    let corpus = corpus.context("no gold labels: pass --gold or --corpus")?;
    Ok((split(corpus, &cfg.split)?.to_vec(), corpus.schema.na_label.clone()))
}

pub fn evaluate(cfg: &RunConfig, gold: Option<&Path>, pred: &Path, table: bool) -> Result<()> {
    let records = read_records(pred)?;
    let corpus = match &cfg.corpus {
        Some(_) => Some(load_inputs(cfg, None)?.corpus),
        None => None,
    };
    let (gold, na) = gold_examples(cfg, gold, corpus.as_ref())?;
    let metrics = evaluate_records(&gold, &records, &na)?;
    let validness = validness_report(&records);
    let mut report = json!({"metrics": metrics, "validness": validness});
    let mut text = format!("{}\n{}", metrics.to_table(), validness.to_table());
    if let Some(corpus) = &corpus {
        let index = load_index(cfg, corpus, None)?;
        let histogram = relevance_histogram(&records, &gold, &index, cfg.k)?;
        let partition = golden_context_partition(&records, &gold, &index, &na)?;
        text.push('\n');
        text.push_str(&histogram.to_table(&cfg.split));
        report["relevance"] = serde_json::to_value(&histogram)?;
        report["golden_context"] = json!({
            "with_gold": partition.with_gold.len(),
            "without_gold": partition.without_gold.len(),
            "metrics_with_gold": partition.metrics_with_gold,
            "metrics_without_gold": partition.metrics_without_gold,
        });
        if let Some(out) = &cfg.out {
            write_atomic(&out.join("relevance.csv"), histogram.to_csv().as_bytes())?;
        }
    }
    if let Some(out) = &cfg.out {
        write_json_atomic(&out.join("report.json"), &report)?;
        write_atomic(&out.join("report.txt"), text.as_bytes())?;
    }
    if table {
        print!("{text}");
        Ok(())
    } else {
        emit(&report)
    }
}

pub fn audit(cfg: &RunConfig, pred: &Path) -> Result<()> {
    let records = read_records(pred)?;
    let report = match &cfg.corpus {
        // Re-audit against the index rather than trusting stored buckets.
        Some(_) => {
            let inputs = load_inputs(cfg, None)?;
            let index = load_index(cfg, &inputs.corpus, None)?;
            let mut buckets = ValidnessBuckets::default();
            for r in &records {
                buckets.merge(&audit_validness(&r.recall, &index).1);
            }
            ValidnessReport::from_buckets(records.len(), buckets)
        }
        None => validness_report(&records),
    };
    emit(&report)
}

pub fn sensitivity(cfg: &RunConfig, pred: &Path) -> Result<()> {
    let out = cfg.out_dir("sensitivity");
    let mut manifest = RunManifest::new("sensitivity", cfg, "");
    let records = read_records(pred)?;
    manifest.input("predictions", pred)?;
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = load_index(cfg, &inputs.corpus, Some(&mut manifest))?;
    let backend = open(cfg, &mut manifest)?;

    let replacements = sensitivity_replace(&records, &index, cfg.seed)?;
    manifest.outputs.push(write_jsonl_atomic(&out.join("replacements.jsonl"), &replacements)?);
    let flagged = replacements.iter().filter(|r| !r.kept.is_empty()).count();

    let mut pcfg = pipeline_config(cfg);
    pcfg.external_demonstrations = Some(
        replacements
            .iter()
            .map(|r| (r.example_id.clone(), r.replaced.clone()))
            .collect(),
    );
    let gold = split(&inputs.corpus, &cfg.split)?;
    let by_id: HashMap<&str, &Example> = gold.iter().map(|e| (e.id.as_str(), e)).collect();
    let examples: Vec<Example> = records
        .iter()
        .map(|r| {
            by_id
                .get(r.example_id.as_str())
                .map(|e| (*e).clone())
                .with_context(|| format!("record `{}` is not in split `{}`", r.example_id, cfg.split))
        })
        .collect::<Result<_>>()?;
    let (_, replaced) = run_to_file(&backend, &inputs, &index, &examples, &pcfg, &out, "predictions.jsonl", &mut manifest)?;

    let na = &inputs.corpus.schema.na_label;
    let before: MetricsReport = evaluate_records(&examples, &records, na)?;
    let after: MetricsReport = evaluate_records(&examples, &replaced, na)?;
    let report = json!({"original": before, "replaced": after, "flagged_records": flagged});
    manifest.outputs.push(write_json_atomic(&out.join("report.json"), &report)?);
    manifest.write(&out)?;
    emit(&report)
}

/// Joint objective on the training instances the emitter would produce.
pub fn loss(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir("loss");
    let mut manifest = RunManifest::new("loss", cfg, "");
    let inputs = load_inputs(cfg, Some(&mut manifest))?;
    let index = load_index(cfg, &inputs.corpus, Some(&mut manifest))?;
    let backend = open(cfg, &mut manifest)?;
    let scorer = Scorer::new(backend.as_ref(), &inputs.templates);
    let emit_cfg = EmitConfig {
        k: cfg.k,
        seed: cfg.seed,
        noise: NoiseConfig { p_noise: cfg.p_noise },
    };
    let mut reports = Vec::new();
    let mut skipped = 0usize;
    for e in index.examples() {
        let Ok(inst) = reason_instance(&index, &inputs.templates, e, &emit_cfg) else {
            skipped += 1;
            continue;
        };
        let pairs: Vec<_> = inst
            .meta
            .pairs
            .iter()
            .map(|[h, t]| groundre::pair_index::PairKey { head: h.clone(), tail: t.clone() })
            .collect();
        let demos: Vec<&Example> = inst
            .meta
            .demonstration_ids
            .iter()
            .filter_map(|id| index.example(id))
            .collect();
        let breakdown = scorer.joint_loss(e, &pairs, &demos, &e.relation, cfg.reason_loss)?;
        reports.push(LossReport {
            example_id: e.id.clone(),
            breakdown,
        });
    }
    manifest.outputs.push(write_jsonl_atomic(&out.join("losses.jsonl"), &reports)?);
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let summary = json!({
        "instances": reports.len(),
        "skipped": skipped,
        "mode": cfg.reason_loss,
        "mean_recall_loss": mean(|r| r.breakdown.recall_loss),
        "mean_reason_loss": mean(|r| r.breakdown.reason_loss),
        "mean_joint_loss": mean(|r| r.breakdown.joint_loss),
    });
    manifest.write(&out)?;
    emit(&summary)
}

pub fn out_dir_hint(cfg: &RunConfig, command: &str) -> Option<PathBuf> {
    match command {
        "stats" | "evaluate" | "audit" => cfg.out.clone(),
        _ => Some(cfg.out_dir(command)),
    }
}
