//! `empdial` command line. [`run`] parses argv and returns the process exit
//! code: 0 success, 1 usage, 2 data or validation, 3 runtime.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "empdial", version, about = "Emotion-state aware empathetic dialogue toolkit")]
pub struct Cli {
    /// TOML training config; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and flattened examples.
    Prep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build both shift-prior matrices and print their strongest transitions.
    Priors {
        #[command(flatten)]
        data: DataArgs,
        /// Write emo_emo.txt and emo_intent.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Warm up the generator, then alternate EmoDM and RespG epochs.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Per-epoch JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score generation and emotion-state prediction on a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Decode with gold rather than predicted states.
        #[arg(long)]
        gold_states: bool,
        #[arg(long)]
        per_response_dist: bool,
        #[arg(long)]
        per_label_ap: bool,
        /// Text report path (also printed to stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        /// `name=value` report path.
        #[arg(long)]
        kv: Option<PathBuf>,
        /// Generated/reference pairs as JSON lines.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Decode one response per context line of a JSONL file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Each line: a string, or an array of turns alternating speaker and
        /// listener, starting with the speaker.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Terminal conversation with per-turn diagnostics.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// HTTP chat service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Idle seconds before a session is dropped.
        #[arg(long, default_value_t = 3600)]
        session_ttl: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Corpus label counts and the most frequent emotion shifts.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<empdial_core::Error> for Failure {
    fn from(e: empdial_core::Error) -> Self {
        use empdial_core::Error as E;
        match e {
            E::Diverged { .. } | E::Tensor(_) | E::Metric(_) => Self::Runtime(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}
