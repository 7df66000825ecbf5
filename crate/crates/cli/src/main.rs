mod interact;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attest_core::analytics::{aggregate_by_library, read_map_csv, AnalyticsError, Dataset, OverallMode};
use attest_core::config::{ConfigError, ConfigFile, LlmBackendConfig};
use attest_core::orchestrator::{run_workflow, CheckpointMode, RunOptions};
use attest_core::stages::{StageError, StageServices};
use attest_core::state::{self, ArtifactKind, StateError, Status, TargetRef, WorkflowState, WorkspaceLock};
use clap::{Args, Parser, Subcommand, ValueEnum};

use interact::{CliObserver, HaltSpec, PromptCheckpoint};

/// Exit status of a process stopped at an `ATTEST_HALT_AFTER` point.
const HALT_EXIT: u8 = 137;
const HALT_ENV: &str = "ATTEST_HALT_AFTER";

#[derive(Parser)]
#[command(name = "attest", version, about = "Agent-driven unit test generation with a resumable staged workflow")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a workspace for one target function.
    Init(InitArgs),
    /// Run the workflow of an initialized workspace.
    Run(RunArgs),
    /// Continue an interrupted workflow at its current stage.
    Resume(ResumeArgs),
    /// Print a workspace's final report, or aggregate a coverage dataset.
    Report(ReportArgs),
    /// Show workflow state, history or a stored artifact.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Workspace directory to create.
    root: PathBuf,
    /// Configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Target as `module.path:function`; overrides the config's [target].
    #[arg(long)]
    target: Option<String>,
    /// Source file of the target; required with --target unless the config names one.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Replace an existing workspace.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    root: PathBuf,
    /// Ask for approval at the configured checkpoint stages.
    #[arg(long)]
    interactive: bool,
    /// Override the iteration budget (only before the workflow has started).
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Override the model backend: live, scripted:PATH or replay:PATH (only before the workflow has started).
    #[arg(long)]
    llm: Option<String>,
    /// Refuse to continue a workflow that has already started.
    #[arg(long)]
    resume_forbidden: bool,
}

#[derive(Args)]
struct ResumeArgs {
    root: PathBuf,
    #[arg(long)]
    interactive: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Overall {
    RecordWeighted,
    LibraryWeighted,
}

#[derive(Args)]
struct ReportArgs {
    /// Workspace whose final report to print.
    #[arg(required_unless_present = "records", conflicts_with = "records")]
    root: Option<PathBuf>,
    /// Coverage records CSV (subject, config, branch_coverage_pct).
    #[arg(long, requires = "groups")]
    records: Option<PathBuf>,
    /// Two-column CSV mapping subject to library.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Two-column CSV mapping config to tool; configs are their own tool when absent.
    #[arg(long)]
    tools: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "record-weighted")]
    overall: Overall,
    #[arg(long, value_enum, default_value = "text")]
    format: TableFormat,
}

#[derive(Args)]
struct InspectArgs {
    root: PathBuf,
    /// Print the transition history.
    #[arg(long, conflicts_with = "artifact")]
    history: bool,
    /// Print the latest artifact of this kind (e.g. analysis_plan, test_file).
    #[arg(long)]
    artifact: Option<String>,
    /// With --artifact: the version produced at this iteration.
    #[arg(long, requires = "artifact")]
    iteration: Option<u32>,
}

/// A failure reported as `error: <category>: <detail>`.
#[derive(Debug)]
struct CliError {
    category: String,
    detail: String,
}

impl CliError {
    fn new(category: impl Into<String>, detail: impl fmt::Display) -> Self {
        CliError { category: category.into(), detail: detail.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}: {}", self.category, self.detail)
    }
}

impl From<StateError> for CliError {
    fn from(e: StateError) -> Self {
        CliError::new(e.category(), e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new("config", e)
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        CliError::new("dataset", e)
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError::new("setup", e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("io", e)
    }
}

fn exit_code(status: Status) -> u8 {
    match status {
        Status::Converged => 0,
        Status::BudgetExhausted => 2,
        Status::Aborted => 3,
        Status::Failed | Status::Running | Status::AwaitingCheckpoint => 1,
    }
}

fn parse_target(spec: &str, source: Option<PathBuf>, from_config: Option<TargetRef>) -> Result<TargetRef, CliError> {
    let (module_path, function_name) = spec
        .split_once(':')
        .filter(|(m, f)| !m.is_empty() && !f.is_empty())
        .ok_or_else(|| CliError::new("target", format!("`{spec}` is not module.path:function")))?;
    let source_file = match (source, from_config) {
        (Some(s), _) => s,
        (None, Some(t)) => t.source_file,
        (None, None) => return Err(CliError::new("target", "--source is required with --target")),
    };
    Ok(TargetRef { module_path: module_path.to_string(), function_name: function_name.to_string(), source_file })
}

fn cmd_init(args: InitArgs) -> Result<u8, CliError> {
    let file = ConfigFile::load(&args.config)?;
    file.snapshot.validate()?;
    let target = match &args.target {
        Some(spec) => parse_target(spec, args.source.clone(), file.target_ref())?,
        None => {
            let mut t = file.target_ref().ok_or_else(|| CliError::new("target", "no --target given and the config has no [target] section"))?;
            if let Some(s) = args.source {
                t.source_file = s;
            }
            t
        }
    };
    let state = state::init_workspace(&args.root, target, file.snapshot, args.force)?;
    println!("workspace: {}", state.workspace_root.display());
    println!("target: {}.{} ({})", state.target.module_path, state.target.function_name, state.target.source_file.display());
    println!("budget: {} iteration(s), block limit {}", state.config.budget.max_iterations, state.config.block_limit);
    let checkpoints: Vec<String> = state.config.checkpoint_stages.iter().map(|s| s.to_string()).collect();
    println!("checkpoints: {}", if checkpoints.is_empty() { "none".into() } else { checkpoints.join(", ") });
    println!("state: {}", state.state_path().display());
    Ok(0)
}

fn halt_spec() -> Result<Option<HaltSpec>, CliError> {
    match std::env::var(HALT_ENV) {
        Ok(v) if !v.trim().is_empty() => HaltSpec::parse(&v).map(Some).map_err(|e| CliError::new("usage", format!("{HALT_ENV}: {e}"))),
        _ => Ok(None),
    }
}

fn drive(state: &mut WorkflowState, interactive: bool) -> Result<u8, CliError> {
    let halt = halt_spec()?;
    let services = StageServices::for_state(state)?;
    let mut observer = CliObserver::new(state, halt);
    let stdin = io::stdin();
    let mut prompt = PromptCheckpoint::new(stdin.lock());
    let checkpoints = if interactive { CheckpointMode::Interactive(&mut prompt) } else { CheckpointMode::Auto };
    let outcome = run_workflow(state, &services, RunOptions { checkpoints, observer: Some(&mut observer) })?;
    if let Some(point) = outcome.halted {
        eprintln!("halted at {point:?} ({HALT_ENV})");
        return Ok(HALT_EXIT);
    }
    if let Some(e) = &outcome.error {
        eprintln!("error: stage: {e}");
    }
    println!("status: {}", outcome.status);
    if let Some(report) = &outcome.report {
        println!("report: {}", report.display());
    }
    Ok(exit_code(outcome.status))
}

fn cmd_run(args: RunArgs) -> Result<u8, CliError> {
    let _lock = WorkspaceLock::acquire(&args.root)?;
    let mut state = state::load_state(&args.root)?;
    if state.status.is_terminal() {
        return Err(StateError::Finished(state.status).into());
    }
    let started = !state.history.is_empty() || state.status != Status::Running;
    if started && args.resume_forbidden {
        return Err(CliError::new("already started", format!("workflow is at {} (iteration {}); use `attest resume`", state.current_stage, state.iteration)));
    }
    if args.max_iterations.is_some() || args.llm.is_some() {
        if started {
            return Err(CliError::new("config", "the configuration snapshot is fixed once the workflow has started"));
        }
        if let Some(n) = args.max_iterations {
            state.config.budget.max_iterations = n;
        }
        if let Some(flag) = &args.llm {
            let mut backend = LlmBackendConfig::parse_flag(flag)?;
            if let LlmBackendConfig::Scripted { path } | LlmBackendConfig::Replay { path } = &mut backend {
                *path = std::path::absolute(&*path)?;
            }
            state.config.llm.backend = backend;
        }
        state.config.validate()?;
        state::save_state(&state)?;
    }
    drive(&mut state, args.interactive)
}

fn cmd_resume(args: ResumeArgs) -> Result<u8, CliError> {
    let _lock = WorkspaceLock::acquire(&args.root)?;
    let mut state = state::load_state(&args.root)?;
    if state.status.is_terminal() {
        // a crash after the final save leaves nothing to redo
        eprintln!("workflow already finished");
        println!("status: {}", state.status);
        if let Some(r) = state.artifacts.get(&ArtifactKind::FinalReport) {
            println!("report: {}", state.abs(&r.path).display());
        }
        return Ok(exit_code(state.status));
    }
    drive(&mut state, args.interactive)
}

fn cmd_report(args: ReportArgs) -> Result<u8, CliError> {
    if let Some(records) = &args.records {
        let dataset = Dataset::from_csv_path(records)?;
        let groups = read_map_csv(args.groups.as_deref().expect("clap enforces --groups"))?;
        let tools: BTreeMap<String, String> = match &args.tools {
            Some(p) => read_map_csv(p)?,
            None => dataset.records().iter().map(|r| (r.config.clone(), r.config.clone())).collect(),
        };
        let mode = match args.overall {
            Overall::RecordWeighted => OverallMode::RecordWeighted,
            Overall::LibraryWeighted => OverallMode::LibraryWeighted,
        };
        let table = aggregate_by_library(&dataset, &groups, &tools, mode)?;
        for w in &table.warnings {
            eprintln!("warning: {w}");
        }
        match args.format {
            TableFormat::Text => print!("{}", table.to_text()),
            TableFormat::Csv => print!("{}", table.to_csv()?),
        }
        return Ok(0);
    }
    let root = args.root.expect("clap enforces a workspace or --records");
    let state = state::load_state(&root)?;
    let r = state
        .artifacts
        .get(&ArtifactKind::FinalReport)
        .ok_or_else(|| CliError::new("no report", format!("workflow status is {}; no final report yet", state.status)))?;
    print!("{}", std::fs::read_to_string(state.abs(&r.path))?);
    Ok(0)
}

fn cmd_inspect(args: InspectArgs) -> Result<u8, CliError> {
    let state = state::load_state(&args.root)?;
    if args.history {
        for e in &state.history {
            println!("{:>4}  {}  iter {:>2}  {:<12}  {:<28}  {}", e.seq, e.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Millis, true), e.iteration, e.stage.to_string(), e.transition.to_string(), e.note);
        }
        return Ok(0);
    }
    if let Some(kind) = &args.artifact {
        let kind: ArtifactKind = kind.parse().map_err(|e: String| CliError::new("usage", e))?;
        let r = match args.iteration {
            Some(i) => state.artifact_at(kind, i),
            None => state.artifacts.get(&kind),
        }
        .ok_or_else(|| CliError::new("no artifact", match args.iteration {
            Some(i) => format!("no {kind} produced at iteration {i}"),
            None => format!("no {kind} recorded"),
        }))?;
        print!("{}", std::fs::read_to_string(state.abs(&r.path))?);
        return Ok(0);
    }
    println!("workspace: {}", state.workspace_root.display());
    println!("target: {}.{}", state.target.module_path, state.target.function_name);
    println!("status: {}", state.status);
    println!("stage: {}", state.current_stage);
    println!("iteration: {} of {}", state.iteration, state.config.budget.max_iterations);
    println!("model calls: {}", state.calls.total);
    for r in state.all_artifacts() {
        println!("artifact {} (iteration {}): {}", r.kind, r.produced_at_iteration, Path::new(&r.path).display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Init(a) => cmd_init(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Resume(a) => cmd_resume(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
