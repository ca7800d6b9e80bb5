//! `groundre`: relation extraction by recalling, retrieving and reasoning.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 backend failure.
//! Results go to stdout as JSON; diagnostics go to stderr.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use groundre::lm_backend::BackendError;
use groundre::objectives::ObjectiveError;
use groundre::pipeline::PipelineError;
use serde_json::json;
use tracing_subscriber::EnvFilter;

use crate::commands::TrainingArgs;
use crate::config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "groundre", version, about = "Grounded relation extraction with retrieved demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    config: ConfigArgs,
    /// More logging on stderr; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, validate and normalize a corpus.
    Ingest,
    /// Build and persist the pair index.
    Index,
    /// Corpus statistics.
    Stats,
    /// Write recall and reason tuning files, their manifest and the training config.
    EmitTuning {
        #[command(flatten)]
        training: TrainingArgs,
    },
    /// Generate entity pairs and audit them against the index.
    Recall,
    /// Predict relations for a split.
    Predict {
        /// JSON object mapping example ids to demonstration ids; skips recall for those examples.
        #[arg(long)]
        demonstrations: Option<PathBuf>,
    },
    /// Score predictions against gold labels.
    Evaluate {
        /// Gold examples; defaults to `--split` of `--corpus`.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        /// Print aligned text tables instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Validness of recalled pairs in a predictions file.
    Audit {
        #[arg(long)]
        pred: PathBuf,
    },
    /// Re-predict with every demonstration swapped for another of the same relation.
    Sensitivity {
        #[arg(long)]
        pred: PathBuf,
    },
    /// Recall, reason and joint objective values over the training instances.
    Loss,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Index => "index",
            Command::Stats => "stats",
            Command::EmitTuning { .. } => "emit-tuning",
            Command::Recall => "recall",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Audit { .. } => "audit",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Loss => "loss",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.config.resolve()?;
    match &cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Index => commands::index(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::EmitTuning { training } => commands::emit_tuning(&cfg, training),
        Command::Recall => commands::recall(&cfg),
        Command::Predict { demonstrations } => commands::predict(&cfg, demonstrations.as_deref()),
        Command::Evaluate { gold, pred, table } => commands::evaluate(&cfg, gold.as_deref(), pred, *table),
        Command::Audit { pred } => commands::audit(&cfg, pred),
        Command::Sensitivity { pred } => commands::sensitivity(&cfg, pred),
        Command::Loss => commands::loss(&cfg),
    }
}

fn is_backend_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return !matches!(e, BackendError::InvalidSpec(_));
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return e.is_backend();
        }
        matches!(cause.downcast_ref::<ObjectiveError>(), Some(ObjectiveError::Backend(_)))
    })
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("GROUNDRE_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);

    let Err(err) = run(&cli) else {
        return ExitCode::SUCCESS;
    };
    let (code, kind) = if is_backend_failure(&err) { (2, "backend") } else { (1, "validation") };
    let report = json!({
        "command": cli.command.name(),
        "kind": kind,
        "exit_code": code,
        "error": format!("{err:#}"),
        "causes": err.chain().map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    eprintln!("error: {err:#}");
    let dir = cli
        .config
        .resolve()
        .ok()
        .and_then(|cfg| commands::out_dir_hint(&cfg, cli.command.name()));
    if let Some(dir) = dir {
        if let Err(e) = output::write_json_atomic(&dir.join("error.json"), &report) {
            eprintln!("could not write error report: {e:#}");
        }
    }
    eprintln!("{report}");
    ExitCode::from(code)
}
