//! `agentos`: run scenarios headlessly, replay and export traces, manage the
//! knowledge store, and start the HTTP service.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parking_lot::RwLock;
use serde_json::json;

use agentos_core::knowledge::{self, HashingEmbedder, KnowledgeStore};
use agentos_core::planner::{HttpBackend, PlannerBackend, Script, ScriptedBackend};
use agentos_core::runtime::{CatalogBundle, ExecutionMode, RuntimeConfig, Services};
use agentos_core::session::evaluate::Verdict;
use agentos_core::session::interaction::{AutoApprove, Interaction};
use agentos_core::session::markdown::export_markdown;
use agentos_core::session::replay::replay;
use agentos_core::session::scenario::Scenario;
use agentos_core::session::trace::{read_trace, write_trace, EventKind};
use config::{PlannerKind, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Bundle(#[from] agentos_core::runtime::BundleError),
    #[error(transparent)]
    Scenario(#[from] agentos_core::session::scenario::ScenarioError),
    #[error(transparent)]
    Trace(#[from] agentos_core::session::trace::TraceError),
    #[error(transparent)]
    Replay(#[from] agentos_core::session::replay::ReplayError),
    #[error(transparent)]
    Knowledge(#[from] agentos_core::knowledge::KnowledgeError),
    #[error("planner backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Bundle(_) => "catalog",
            CliError::Scenario(_) => "scenario",
            CliError::Trace(_) => "trace",
            CliError::Replay(_) => "replay",
            CliError::Knowledge(_) => "knowledge",
            CliError::Backend(_) => "backend",
            CliError::Io(_) => "io",
        }
    }
}

#[derive(Parser)]
#[command(name = "agentos", version, about = "Desktop agent runtime")]
struct Cli {
    /// Settings file (.toml or .json) mirroring the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario in a fresh session and evaluate it.
    Run(RunArgs),
    /// Re-apply a trace's desktop mutations and compare state hashes.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Manage the knowledge store.
    Knowledge {
        #[command(subcommand)]
        action: KnowledgeCommand,
    },
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Export a trace as markdown.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KnowledgeCommand {
    /// Add help documents from a directory of JSON files.
    Ingest {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Turn successful evaluated rounds of a trace into experience records.
    Distill {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Speculative,
}

impl From<Mode> for ExecutionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Single => ExecutionMode::Single,
            Mode::Speculative => ExecutionMode::Speculative,
        }
    }
}

#[derive(Args)]
struct PlannerArgs {
    #[arg(long, value_enum)]
    planner: Option<PlannerKind>,
    #[arg(long)]
    planner_endpoint: Option<String>,
    #[arg(long)]
    planner_model: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    planner: PlannerArgs,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Planner-step budget for the round.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_batch: Option<usize>,
    /// Approve safeguard prompts automatically (recorded as automatic in the trace).
    #[arg(long)]
    auto_approve: bool,
    /// Knowledge store directory to retrieve from.
    #[arg(long)]
    knowledge: Option<PathBuf>,
    /// Write the session trace (JSON lines) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the markdown log here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[command(flatten)]
    planner: PlannerArgs,
    /// Planner script for the scripted backend: a script file or a scenario
    /// whose script to use. Repeatable.
    #[arg(long)]
    script: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    knowledge: Option<PathBuf>,
}

const DEFAULT_STORE: &str = "knowledge";
const DEFAULT_PORT: u16 = 8080;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| {
        tracing_subscriber::EnvFilter::new(if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" })
    });
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let settings = file.with_env(|k| std::env::var(k).ok());
    match cli.command {
        Command::Run(args) => run(&settings, args),
        Command::Replay { trace, catalog } => replay_cmd(&settings, &trace, catalog),
        Command::Knowledge { action } => knowledge_cmd(&settings, action),
        Command::Serve(args) => serve(&settings, args),
        Command::Report { trace, out } => {
            let events = read_trace(&trace)?;
            let id = events.first().map(|e| e.session.clone()).unwrap_or_default();
            std::fs::write(&out, export_markdown(&id, &events))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn catalog_dir(settings: &Settings, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| settings.catalog.clone())
        .ok_or_else(|| CliError::Usage("no catalog given (--catalog or `catalog` in the config file)".into()))
}

fn runtime_config(settings: &Settings, mode: Option<Mode>, max_steps: Option<usize>, max_batch: Option<usize>) -> RuntimeConfig {
    let mut config = RuntimeConfig::default();
    if let Some(m) = mode.map(ExecutionMode::from).or(settings.mode) {
        config.mode = m;
    }
    if let Some(n) = max_steps.or(settings.max_steps) {
        config.step_budget = n;
    }
    if let Some(n) = max_batch.or(settings.max_batch) {
        config.max_batch = n;
    }
    config
}

fn backend(settings: &Settings, args: &PlannerArgs, script: impl FnOnce() -> Result<Script, CliError>) -> Result<Arc<dyn PlannerBackend>, CliError> {
    let mut settings = settings.clone();
    if let Some(e) = &args.planner_endpoint {
        settings.planner.endpoint = Some(e.clone());
    }
    if let Some(m) = &args.planner_model {
        settings.planner.model = Some(m.clone());
    }
    match args.planner.or(settings.planner.kind).unwrap_or_default() {
        PlannerKind::Scripted => Ok(Arc::new(ScriptedBackend::new(script()?))),
        PlannerKind::Http => {
            let b = HttpBackend::new(settings.http_backend()?).map_err(|e| CliError::Backend(e.to_string()))?;
            Ok(Arc::new(b))
        }
    }
}

fn load_store(dir: &Path) -> Result<KnowledgeStore, CliError> {
    Ok(KnowledgeStore::load_dir(dir, Box::new(HashingEmbedder::default()))?)
}

fn with_knowledge(services: Services, dir: Option<&Path>) -> Result<Services, CliError> {
    Ok(match dir {
        Some(d) => services.with_knowledge(Arc::new(RwLock::new(load_store(d)?))),
        None => services,
    })
}

fn run(settings: &Settings, args: RunArgs) -> Result<ExitCode, CliError> {
    let bundle = CatalogBundle::load(catalog_dir(settings, args.catalog.clone())?)?;
    let scenario = Scenario::load(&args.scenario)?;
    let backend = backend(settings, &args.planner, || Ok(scenario.script()?))?;
    let knowledge = args.knowledge.clone().or_else(|| settings.knowledge.clone());
    let services = with_knowledge(bundle.services(backend)?, knowledge.as_deref())?;
    let config = runtime_config(settings, args.mode, args.max_steps, args.max_batch);

    let mut interaction: Box<dyn Interaction> = if args.auto_approve || settings.auto_approve == Some(true) {
        Box::new(AutoApprove::with_replies(scenario.clarifications.clone()))
    } else {
        Box::new(scenario.interaction())
    };
    let mut result = scenario.run_with(&bundle, Arc::new(services), config, interaction.as_mut())?;
    result.session.finish();
    let events = result.session.events();
    if let Some(path) = &args.trace {
        write_trace(path, &events)?;
    }
    if let Some(path) = &args.report {
        std::fs::write(path, result.session.export_markdown())?;
    }

    let o = &result.outcome;
    let name = if scenario.name.is_empty() { args.scenario.display().to_string() } else { scenario.name.clone() };
    println!("scenario: {name}");
    println!("status: {}", o.status);
    if let Some(kind) = o.fail_kind {
        println!("fail_kind: {kind}");
    }
    let verdict = match &result.evaluation {
        Ok(ev) => {
            println!("verdict: {}", ev.verdict);
            for c in &ev.criteria {
                println!("  {} = {}", c.description, c.score);
            }
            Some(ev.verdict)
        }
        Err(e) => {
            println!("verdict: none ({e})");
            None
        }
    };
    println!("steps: {}", o.steps);
    println!("planner_calls: {}", o.planner_calls);
    println!("host_planner_calls: {}", o.host_planner_calls);
    println!("backend_attempts: {}", o.backend_attempts);
    println!("executor_actions: {}", o.executor_actions);
    println!("events: {}", events.len());
    println!("state_hash: {}", o.final_state_hash);
    let pending = events.iter().filter(|e| e.kind == EventKind::Pending).count();
    if pending > 0 {
        println!("confirmations: {pending}");
    }
    Ok(if verdict == Some(Verdict::Success) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn replay_cmd(settings: &Settings, trace: &Path, catalog: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let bundle = CatalogBundle::load(catalog_dir(settings, catalog)?)?;
    let events = read_trace(trace)?;
    let report = replay(&events, bundle.catalog)?;
    println!("mutations: {}", report.mutations);
    println!("state_hash: {}", report.final_hash);
    println!("recorded_hash: {}", report.recorded_hash.as_deref().unwrap_or("-"));
    if let Some(d) = &report.first_divergence {
        println!("first_divergence: event {} recorded {} replayed {}", d.seq, d.recorded, d.replayed);
    }
    if report.matched {
        println!("MATCH");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("MISMATCH");
        Ok(ExitCode::from(1))
    }
}

fn store_dir(settings: &Settings, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| settings.knowledge.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

fn knowledge_cmd(settings: &Settings, action: KnowledgeCommand) -> Result<ExitCode, CliError> {
    match action {
        KnowledgeCommand::Ingest { docs, store } => {
            let dir = store_dir(settings, store);
            let mut s = load_store(&dir)?;
            let stats = s.ingest_docs(knowledge::read_docs_dir(&docs)?)?;
            s.save_dir(&dir)?;
            println!("ingested: {}", stats.ingested);
            println!("duplicates: {}", stats.duplicates);
            println!("docs: {}", stats.total_entries);
            println!("store: {}", dir.display());
        }
        KnowledgeCommand::Distill { trace, store } => {
            let dir = store_dir(settings, store);
            let mut s = load_store(&dir)?;
            let records = knowledge::distill(&read_trace(&trace)?);
            let mut added = 0;
            for r in records {
                if s.add_experience(r)? {
                    added += 1;
                }
            }
            s.save_dir(&dir)?;
            println!("distilled: {added}");
            println!("experiences: {}", s.experience_count());
            println!("store: {}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// A script file, or a scenario file whose embedded script to use.
fn load_script(path: &Path) -> Result<Script, CliError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if value.get("request").is_some() {
        return Ok(Scenario::load(path)?.script()?);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn serve(settings: &Settings, args: ServeArgs) -> Result<ExitCode, CliError> {
    let bundle = CatalogBundle::load(catalog_dir(settings, args.catalog.clone())?)?;
    let backend = backend(settings, &args.planner, || {
        let mut merged = Script::default();
        for path in &args.script {
            let s = load_script(path)?;
            merged.host.extend(s.host);
            merged.app.extend(s.app);
            merged.judge.extend(s.judge);
        }
        Ok(merged)
    })?;
    let knowledge = args.knowledge.clone().or_else(|| settings.knowledge.clone());
    let services = with_knowledge(bundle.services(backend)?, knowledge.as_deref())?;
    let config = runtime_config(settings, args.mode, args.max_steps, None);
    let port = args.port.or(settings.port).unwrap_or(DEFAULT_PORT);
    let state = agentos_service::AppState::new(bundle, Arc::new(services), config);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        agentos_service::serve(listener, state).await
    })?;
    Ok(ExitCode::SUCCESS)
}
