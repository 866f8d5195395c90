//! `mosekit`: file-based pipeline over the multi-exit encoder lab.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

pub const CHECK_MODE_ENV: &str = "MOSEKIT_CHECK_MODE";

#[derive(Debug, Parser, Clone)]
#[command(name = "mosekit", version, about = "Multi-exit encoder lab: data, training, evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run configuration; missing fields take desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `all` or a comma-separated list of exit layers.
    #[arg(long, global = true, default_value = "all")]
    pub exits: String,
    /// Worker cap. Every stage currently runs on one worker.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Dotted-key override, e.g. `--set pretrain.plan.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Retrieval,
    Clone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedSource {
    Triplets,
    Corpus,
}

#[derive(Debug, Subcommand, Clone)]
pub enum Cmd {
    /// Generate a corpus, triplets, clone pairs and the vocabulary.
    Gen {
        /// Overrides `gen.repos`.
        #[arg(long)]
        repos: Option<usize>,
    },
    /// Near-deduplicate the corpus and triplets of a data directory.
    Dedup {
        #[arg(long)]
        data: PathBuf,
    },
    /// MLM plus ICC pre-training with multi-exit loss weighting.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune for retrieval or clone detection.
    Finetune {
        task: Task,
        #[arg(long)]
        data: PathBuf,
        /// Start checkpoint; a fresh initialization when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Write unit embeddings per exit.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "triplets")]
        source: EmbedSource,
    },
    /// Per-exit retrieval or clone-detection metrics.
    Eval {
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Trade-off CSV and plot data from evaluation reports.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Reports of single-exit fine-tuned baselines; adds delta rows.
        #[arg(long, num_args = 1..)]
        baselines: Vec<PathBuf>,
    },
    /// Permutation tests between exits on positive-pair similarities.
    Permtest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the invariant suite.
    Selfcheck,
    /// Re-run the command recorded in a manifest and compare its outputs.
    Replay { manifest: PathBuf },
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::Gen { .. } => "gen",
            Cmd::Dedup { .. } => "dedup",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Embed { .. } => "embed",
            Cmd::Eval { .. } => "eval",
            Cmd::Report { .. } => "report",
            Cmd::Permtest { .. } => "permtest",
            Cmd::Selfcheck => "selfcheck",
            Cmd::Replay { .. } => "replay",
        }
    }
}

/// A failed command with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: Self::DATA, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: Self::NUMERIC, message: msg.into() }
    }
}

impl From<mosekit_core::Error> for Failure {
    fn from(e: mosekit_core::Error) -> Self {
        use mosekit_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::InvalidConfig(_) | E::UnknownExit(_) | E::UnsupportedLanguage(_) => Self::USAGE,
            E::ZeroVector | E::NonFinite { .. } => Self::NUMERIC,
            _ => Self::DATA,
        };
        Self { code, message: e.to_string() }
    }
}

/// Command result: fields of the one-line JSON summary.
pub type Summary = Map<String, Value>;

#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub check_mode: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::USAGE } else { 0 };
            let _ = e.print();
            if code != 0 {
                println!("{}", json!({"status": "error", "code": code, "message": "usage error"}));
            }
            return ExitCode::from(code);
        }
    };
    let ctx = Ctx { check_mode: std::env::var(CHECK_MODE_ENV).is_ok_and(|v| v == "1") };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let name = cli.cmd.name();
    match commands::execute(&cli, &argv, ctx) {
        Ok(mut summary) => {
            summary.insert("command".into(), name.into());
            summary.insert("status".into(), "ok".into());
            println!("{}", Value::Object(summary));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            println!("{}", json!({"command": name, "status": "error", "code": f.code, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}
