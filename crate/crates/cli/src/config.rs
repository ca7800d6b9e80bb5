//! Run configuration: TOML file values overridden by flags.
//!
//! Credentials are never read from here; the HTTP backend takes its token from
//! the environment only. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use groundre::corpus::CorpusFormat;
use groundre::objectives::ReasonMode;
use groundre::pipeline::{FallbackPolicy, Mode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub na_label: Option<String>,
    /// Persisted index; rebuilt from `index_split` when absent.
    pub index: Option<PathBuf>,
    pub index_split: String,
    pub split: String,
    pub case_fold: bool,
    pub k: usize,
    pub backend: Option<String>,
    pub model: Option<String>,
    pub mode: Mode,
    pub fallback: FallbackPolicy,
    pub reason_loss: ReasonMode,
    pub fuzzy_labels: bool,
    pub seed: u64,
    pub parallelism: usize,
    pub failure_threshold: usize,
    pub p_noise: f64,
    pub templates: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            format: CorpusFormat::default(),
            na_label: None,
            index: None,
            index_split: "train".into(),
            split: "test".into(),
            case_fold: false,
            k: 5,
            backend: None,
            model: None,
            mode: Mode::default(),
            fallback: FallbackPolicy::default(),
            reason_loss: ReasonMode::default(),
            fuzzy_labels: false,
            seed: 0,
            parallelism: 1,
            failure_threshold: 3,
            p_noise: 0.5,
            templates: None,
            out: None,
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file key of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus file or directory.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// canonical-jsonl or tacred-json.
    #[arg(long, global = true)]
    pub format: Option<CorpusFormat>,
    /// No-relation label (default NA).
    #[arg(long, global = true)]
    pub na_label: Option<String>,
    /// Persisted pair index.
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Split indexed when no persisted index is given.
    #[arg(long, global = true)]
    pub index_split: Option<String>,
    /// Split to process.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Lowercase entity surfaces before matching.
    #[arg(long, global = true)]
    pub case_fold: Option<bool>,
    /// Entity pairs recalled per example (default 5).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Scripted spec path or http(s) base URL.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Model name sent to an HTTP backend.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// icl, majority-vote or marginal.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    /// zero-shot, predict-na or fail.
    #[arg(long, global = true)]
    pub fallback: Option<FallbackPolicy>,
    /// joint-context or literal-sum.
    #[arg(long, global = true)]
    pub reason_loss: Option<ReasonMode>,
    /// Accept a relation output one edit away from a unique label.
    #[arg(long, global = true)]
    pub fuzzy_labels: Option<bool>,
    /// Seed for every sampled decision (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Examples processed concurrently (default 1).
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Consecutive failed examples that abort a run (default 3).
    #[arg(long, global = true)]
    pub failure_threshold: Option<usize>,
    /// Probability that a reason tuning instance gets distractors (default 0.5).
    #[arg(long, global = true)]
    pub p_noise: Option<f64>,
    /// Directory of prompt templates.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        let a = self.clone();
        set_opt(&mut cfg.corpus, a.corpus);
        set(&mut cfg.format, a.format);
        set_opt(&mut cfg.na_label, a.na_label);
        set_opt(&mut cfg.index, a.index);
        set(&mut cfg.index_split, a.index_split);
        set(&mut cfg.split, a.split);
        set(&mut cfg.case_fold, a.case_fold);
        set(&mut cfg.k, a.k);
        set_opt(&mut cfg.backend, a.backend);
        set_opt(&mut cfg.model, a.model);
        set(&mut cfg.mode, a.mode);
        set(&mut cfg.fallback, a.fallback);
        set(&mut cfg.reason_loss, a.reason_loss);
        set(&mut cfg.fuzzy_labels, a.fuzzy_labels);
        set(&mut cfg.seed, a.seed);
        set(&mut cfg.parallelism, a.parallelism);
        set(&mut cfg.failure_threshold, a.failure_threshold);
        set(&mut cfg.p_noise, a.p_noise);
        set_opt(&mut cfg.templates, a.templates);
        set_opt(&mut cfg.out, a.out);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            bail!("p_noise must lie in [0, 1], got {}", self.p_noise);
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .context("no corpus given (use --corpus or `corpus` in the config file)")
    }

    pub fn backend_source(&self) -> Result<&str> {
        self.backend
            .as_deref()
            .context("no backend given (use --backend or `backend` in the config file)")
    }

    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
    }
}
