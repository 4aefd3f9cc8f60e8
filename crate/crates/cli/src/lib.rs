//! Command-line driver and HTTP service for `memrl-core`.
//!
//! Every command is a thin wrapper: it loads a config, opens the journal-backed
//! bank and forwards to the engine, so the CLI, the service and the library
//! give identical results for identical inputs.

pub mod service;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use memrl_core::engine::RetrievalOverrides;
use memrl_core::retrieval::RetrievalParams;
use memrl_core::simulation::ExperimentConfig;
use memrl_core::{EngineConfig, IntentInput, MemoryEngine, MemrlError, OutcomeLabel, RetrievalContext};
use serde::Serialize;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "memrl", version, about = "Episodic memory engine with value-aware retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation experiment and write its CSV and JSON reports.
    RunSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Replace the experiment's seed (or the start of its seed range).
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with status 3 if any acceptance check in the report fails.
        #[arg(long)]
        check: bool,
    },
    /// Add a memory to a bank.
    Add {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long)]
        experience: String,
        #[arg(long, value_enum, default_value_t = Label::Unlabeled)]
        label: Label,
        #[arg(long, allow_negative_numbers = true)]
        q_init: Option<f64>,
        intent: String,
    },
    /// Retrieve memories for an intent and print the context as JSON.
    Query {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        intent: String,
    },
    /// Apply one reward to the given memory ids and print the updates.
    Feedback {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        #[arg(long, allow_negative_numbers = true)]
        reward: f64,
    },
    /// Serve the bank over HTTP until interrupted.
    Serve {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct BankArgs {
    /// Journal file holding the bank; created if missing.
    #[arg(long)]
    pub bank: PathBuf,
    /// Engine config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Label {
    Success,
    Failure,
    Unlabeled,
}

impl From<Label> for OutcomeLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Success => OutcomeLabel::Success,
            Label::Failure => OutcomeLabel::Failure,
            Label::Unlabeled => OutcomeLabel::Unlabeled,
        }
    }
}

/// A failure carrying the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<MemrlError>() {
            Some(
                MemrlError::Config(_)
                | MemrlError::InvalidArgument(_)
                | MemrlError::NotFound(_)
                | MemrlError::InvalidDimension { .. },
            ) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

impl From<MemrlError> for Failure {
    fn from(e: MemrlError) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("MEMRL_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `args` and runs the command, printing results to stdout and
/// diagnostics to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    init_logging();
    match run(cli.command) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Runs one command and returns what it would print on success.
pub fn run(command: Command) -> Result<String, Failure> {
    match command {
        Command::RunSim { config, out, seed, check } => run_sim(&config, &out, seed, check),
        Command::Add { bank, experience, label, q_init, intent } => {
            let engine = open_engine(&bank)?;
            let id = engine.insert(&IntentInput::Text(intent), &experience, label.into(), q_init)?;
            engine.flush()?;
            Ok(to_json(&serde_json::json!({ "id": id })))
        }
        Command::Query { bank, lambda, delta, k1, k2, intent } => {
            let engine = open_engine(&bank)?;
            let overrides = RetrievalOverrides { lambda, delta, k1, k2 };
            let ctx = engine.retrieve(&IntentInput::Text(intent), &overrides)?;
            Ok(to_json(&QueryOutput::from(&ctx)))
        }
        Command::Feedback { bank, ids, reward } => {
            let engine = open_engine(&bank)?;
            let updates = engine.feedback(&ids, reward)?;
            engine.flush()?;
            Ok(to_json(&serde_json::json!({ "updates": updates })))
        }
        Command::Serve { bank, bind } => {
            let engine = Arc::new(open_engine(&bank)?);
            let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .with_context(|| format!("binding {bind}"))?;
                tracing::info!(addr = %listener.local_addr()?, "serving");
                service::serve(engine, listener, service::shutdown_signal()).await
            })?;
            Ok(String::new())
        }
    }
}

fn run_sim(config: &Path, out: &Path, seed: Option<u64>, check: bool) -> Result<String, Failure> {
    let mut cfg = ExperimentConfig::load(config).map_err(Failure::config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let report = cfg.run()?;
    let (csv, json) = report.write(out)?;
    let mut lines = vec![format!("wrote {} and {}", csv.display(), json.display())];
    for c in &report.checks {
        lines.push(format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    if check && !report.passed() {
        for line in &lines {
            eprintln!("{line}");
        }
        return Err(Failure {
            code: EXIT_CHECK,
            error: anyhow::anyhow!("{} acceptance check(s) failed", report.checks.iter().filter(|c| !c.passed).count()),
        });
    }
    Ok(lines.join("\n"))
}

/// Loads the engine config (or defaults) and points its journal at `--bank`.
pub fn engine_config(args: &BankArgs) -> Result<EngineConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => EngineConfig::load(path).map_err(Failure::config)?,
        None => EngineConfig::default(),
    };
    cfg.journal_path = Some(args.bank.clone());
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn open_engine(args: &BankArgs) -> Result<MemoryEngine, Failure> {
    let cfg = engine_config(args)?;
    MemoryEngine::open(cfg)
        .with_context(|| format!("opening bank {}", args.bank.display()))
        .map_err(Failure::from)
}

#[derive(Debug, Serialize)]
pub struct QueryOutput {
    pub selected: Vec<memrl_core::ScoredCandidate>,
    pub pool_size: usize,
    pub params: RetrievalParams,
}

impl From<&RetrievalContext> for QueryOutput {
    fn from(ctx: &RetrievalContext) -> Self {
        Self {
            selected: ctx.selected.clone(),
            pool_size: ctx.pool_size,
            params: ctx.params,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable output")
}
