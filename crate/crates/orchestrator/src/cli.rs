//! Command line front end.

use std::io::{BufRead, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use autolab_core::agent::{load_session, Agent, AgentConfig, AgentSession, Approval, Mode, SessionState, SESSION_FILE};
use autolab_core::clock::{SharedClock, VirtualClock, WallClock};
use autolab_core::events::{EventKind, EventSink};
use autolab_core::llm::{ChatMessage, Role, ScriptedStub};
use autolab_core::scan::{export_csv, export_pgm, ScanPlan};
use autolab_core::stage::StagePose;
use autolab_core::transport::{InstrumentKind, Rack, RackConfig, ResourceDescriptor, ResourceId};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::service::{AppState, ServiceConfig};
use crate::setup::{
    acquire, default_predicate, llm_setup, open_agent, open_agent_in, parse_predicate, BenchArgs, LlmChoice, RackArgs,
};

#[derive(Debug, Parser)]
#[command(name = "autolab", version, about = "Virtual lab rack, raster scans and an LLM agent that writes LabScript")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Virtual instrument rack.
    Rack {
        #[command(subcommand)]
        action: RackCommand,
    },
    /// Raster acquisitions.
    Scan {
        #[command(subcommand)]
        action: ScanCommand,
    },
    /// Agent sessions.
    Agent {
        #[command(subcommand)]
        action: AgentCommand,
    },
    /// Run the HTTP service with its own rack.
    Serve(ServeArgs),
    /// Re-run a recorded session with its recorded replies and compare transcripts.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum RackCommand {
    /// Serve the SMU and stage until interrupted.
    Up(RackArgs),
}

#[derive(Debug, Subcommand)]
pub enum ScanCommand {
    /// Acquire one frame and write it as CSV.
    Run(ScanArgs),
}

#[derive(Debug, Subcommand)]
pub enum AgentCommand {
    /// Drive one session to completion.
    Run(AgentArgs),
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, default_value_t = 32)]
    pub nx: usize,
    #[arg(long, default_value_t = 32)]
    pub ny: usize,
    /// Column spacing in micrometres.
    #[arg(long, default_value_t = autolab_core::scan::DEFAULT_PITCH_UM)]
    pub pitch_x: f64,
    /// Row spacing in micrometres.
    #[arg(long, default_value_t = autolab_core::scan::DEFAULT_PITCH_UM)]
    pub pitch_y: f64,
    #[arg(long, default_value_t = 0.0)]
    pub origin_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pub origin_y: f64,
    /// SMU bias in volts.
    #[arg(long, default_value_t = autolab_core::scan::DEFAULT_BIAS_V)]
    pub bias: f64,
    /// Wait after each move, in milliseconds.
    #[arg(long, default_value_t = autolab_core::scan::DEFAULT_SETTLE_MS)]
    pub settle: f64,
    #[arg(long, default_value = "frame.csv")]
    pub out: PathBuf,
    /// Also write a 16-bit PGM image.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// SMU of an already running rack; without it a private rack is started.
    #[arg(long, requires = "stage")]
    pub smu: Option<ResourceId>,
    /// Stage of an already running rack.
    #[arg(long, requires = "smu")]
    pub stage: Option<ResourceId>,
    #[command(flatten)]
    pub bench: BenchArgs,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub goal: String,
    /// `auto` runs unattended; `step` asks before every execution.
    #[arg(long, default_value = "auto")]
    pub mode: Mode,
    #[arg(long, default_value_t = autolab_core::agent::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value_t = LlmChoice::Http)]
    pub llm: LlmChoice,
    /// Canned replies for `--llm stub`; may carry a `predicate`.
    #[arg(long)]
    pub stub_script: Option<PathBuf>,
    /// Success check: `manual`, `records:N`, `file-rows:PATH:N` or JSON.
    #[arg(long)]
    pub predicate: Option<String>,
    #[arg(long, default_value = "autolab-data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub session_id: Option<String>,
    /// Use a rack that is already running on the given ports instead of starting one.
    #[arg(long)]
    pub external: bool,
    #[command(flatten)]
    pub rack: RackArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Listen address of the API. Anything but loopback exposes it to the network.
    #[arg(long, default_value = "127.0.0.1")]
    pub listen: IpAddr,
    #[arg(long, value_enum, default_value_t = LlmChoice::Http)]
    pub llm: LlmChoice,
    /// Default stub script for sessions created without an inline one.
    #[arg(long)]
    pub stub_script: Option<PathBuf>,
    #[arg(long, default_value = "autolab-data")]
    pub data_dir: PathBuf,
    /// Simulate time instead of waiting for it.
    #[arg(long)]
    pub virtual_clock: bool,
    #[command(flatten)]
    pub rack: RackArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub session: PathBuf,
    /// Where the replayed session goes; defaults to a fresh `replay-N` beside the original.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Rack { action: RackCommand::Up(args) } => rack_up(&args),
        Command::Scan { action: ScanCommand::Run(args) } => scan_run(&args),
        Command::Agent { action: AgentCommand::Run(args) } => agent_run(&args),
        Command::Serve(args) => serve(&args),
        Command::Replay(args) => replay(&args),
    }
}

fn warn_if_exposed(addr: IpAddr, what: &str) {
    if !addr.is_loopback() {
        log::warn!("{what} listening on {addr}: reachable from other hosts, with no authentication");
    }
}

fn print_resources(resources: &[ResourceDescriptor]) {
    for r in resources {
        println!("{}  {}  {}", r.resource_id, r.kind, r.label);
    }
}

fn rack_up(args: &RackArgs) -> Result<(), CliError> {
    warn_if_exposed(args.bind, "rack");
    let rack = Rack::up(args.config(), WallClock::shared()).map_err(runtime)?;
    print_resources(&rack.list_resources());
    println!("rack up; Ctrl-C to stop");
    loop {
        std::thread::park();
    }
}

fn scan_run(args: &ScanArgs) -> Result<(), CliError> {
    let plan = ScanPlan {
        origin: StagePose { x: args.origin_x, y: args.origin_y },
        nx: args.nx,
        ny: args.ny,
        pitch_x: args.pitch_x,
        pitch_y: args.pitch_y,
        settle_ms: args.settle,
        bias: args.bias,
        ..ScanPlan::default()
    };
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let (_rack, resources, clock): (Option<Rack>, Vec<ResourceDescriptor>, SharedClock) = match (&args.smu, &args.stage) {
        (Some(smu), Some(stage)) => {
            let resources = vec![
                ResourceDescriptor { resource_id: smu.clone(), kind: InstrumentKind::ScpiSmu, label: "SMU".into() },
                ResourceDescriptor { resource_id: stage.clone(), kind: InstrumentKind::XypStage, label: "stage".into() },
            ];
            (None, resources, WallClock::shared())
        }
        _ => {
            let clock: SharedClock = VirtualClock::shared();
            let rack = Rack::up(args.bench.apply(RackConfig::ephemeral()), clock.clone()).map_err(runtime)?;
            let resources = rack.list_resources();
            (Some(rack), resources, clock)
        }
    };

    let progress = Progress::new(plan.pixel_count());
    let frame = acquire(&plan, &resources, &clock, &progress).map_err(runtime)?;
    std::fs::write(&args.out, export_csv(&frame)).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    if let Some(pgm) = &args.pgm {
        std::fs::write(pgm, export_pgm(&frame)).map_err(|e| runtime(format!("{}: {e}", pgm.display())))?;
    }
    match &frame.abort_reason {
        None => {
            println!("{}x{} frame written to {}", frame.nx, frame.ny, args.out.display());
            Ok(())
        }
        Some(why) => Err(runtime(format!(
            "scan stopped after {} of {} pixels: {why}; partial frame written to {}",
            frame.acquired,
            plan.pixel_count(),
            args.out.display()
        ))),
    }
}

/// Prints scan progress to stderr in steps of ten percent.
struct Progress {
    total: usize,
    seen: AtomicUsize,
}

impl Progress {
    fn new(total: usize) -> Self {
        Self { total, seen: AtomicUsize::new(0) }
    }
}

impl EventSink for Progress {
    fn emit(&self, kind: EventKind, _: Value) {
        if kind != EventKind::PixelMeasured {
            return;
        }
        let n = self.seen.fetch_add(1, Ordering::Relaxed) + 1;
        if n * 10 / self.total != (n - 1) * 10 / self.total {
            eprintln!("{n}/{} pixels", self.total);
        }
    }
}

/// Echoes agent progress to stderr.
struct Narrator;

impl EventSink for Narrator {
    fn emit(&self, kind: EventKind, p: Value) {
        let iteration = p["index"].as_u64().unwrap_or_default();
        match kind {
            EventKind::IterationStarted => eprintln!("-- iteration {iteration}"),
            EventKind::CodeProposed => eprintln!("proposed code (artifact {})", p["artifact"].as_str().unwrap_or("-")),
            EventKind::Executed => eprintln!("executed: {}", p["exit"]),
            EventKind::SessionTerminal => eprintln!("session ended: {}", p["state"].as_str().unwrap_or("?")),
            _ => {}
        }
    }
}

fn external_resources(args: &RackArgs) -> Vec<ResourceDescriptor> {
    let host = args.bind.to_string();
    vec![
        ResourceDescriptor { resource_id: ResourceId::new(host.clone(), args.smu_port), kind: InstrumentKind::ScpiSmu, label: "SMU".into() },
        ResourceDescriptor { resource_id: ResourceId::new(host, args.stage_port), kind: InstrumentKind::XypStage, label: "stage".into() },
    ]
}

fn agent_run(args: &AgentArgs) -> Result<(), CliError> {
    let explicit = args.predicate.as_deref().map(parse_predicate).transpose().map_err(CliError::Usage)?;
    let llm = llm_setup(args.llm, None, args.stub_script.as_deref()).map_err(CliError::Usage)?;
    let predicate = explicit.or(llm.predicate).unwrap_or_else(default_predicate);
    let config = AgentConfig {
        id: args.session_id.clone(),
        mode: args.mode,
        max_iters: args.max_iters,
        model: llm.model,
        ..AgentConfig::new(&args.goal, predicate)
    };

    let (_rack, resources, clock): (Option<Rack>, Vec<ResourceDescriptor>, SharedClock) = if args.external {
        (None, external_resources(&args.rack), WallClock::shared())
    } else {
        let clock: SharedClock = VirtualClock::shared();
        let rack = Rack::up(args.rack.config(), clock.clone()).map_err(runtime)?;
        let resources = rack.list_resources();
        (Some(rack), resources, clock)
    };

    let mut agent = open_agent(config, resources, &args.data_dir, llm.backend, clock, Box::new(Narrator)).map_err(runtime)?;
    drive(&mut agent, &mut std::io::stdin().lock())?;
    report(&agent)
}

/// Runs the session, asking the operator on the terminal whenever it parks.
fn drive(agent: &mut Agent, input: &mut dyn BufRead) -> Result<(), CliError> {
    loop {
        let state = agent.run().map_err(runtime)?.clone();
        if state != SessionState::AwaitingApproval {
            return Ok(());
        }
        let code = &agent.session().iterations.last().expect("parked on an iteration").proposed_code;
        eprintln!("{code}\n-- run this? [y = approve, anything else = reject with that text as the reason]");
        let _ = std::io::stderr().flush();
        let mut line = String::new();
        if input.read_line(&mut line).map_err(runtime)? == 0 {
            return Err(runtime("no operator decision (end of input); session left awaiting approval"));
        }
        let answer = line.trim();
        if answer.eq_ignore_ascii_case("y") || answer.eq_ignore_ascii_case("yes") {
            agent.approve(DEFAULT_OPERATOR).map_err(runtime)?;
        } else {
            let reason = if answer.is_empty() { "rejected without comment" } else { answer };
            agent.reject(DEFAULT_OPERATOR, reason).map_err(runtime)?;
        }
    }
}

const DEFAULT_OPERATOR: &str = "operator";

fn report(agent: &Agent) -> Result<(), CliError> {
    let s = agent.session();
    println!("session {} in {}", s.id, agent.dir().display());
    println!("{} after {} iteration(s)", s.state, s.iterations.len());
    match s.state {
        SessionState::Succeeded => Ok(()),
        _ => Err(runtime(format!("session did not succeed: {}", s.state))),
    }
}

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    warn_if_exposed(args.listen, "API");
    warn_if_exposed(args.rack.bind, "rack");
    // fail at startup rather than on the first session
    if args.llm == LlmChoice::Http || args.stub_script.is_some() {
        llm_setup(args.llm, None, args.stub_script.as_deref()).map_err(CliError::Usage)?;
    }
    let clock: SharedClock = if args.virtual_clock { VirtualClock::shared() } else { WallClock::shared() };
    let rack = Rack::up(args.rack.config(), clock).map_err(runtime)?;
    print_resources(&rack.list_resources());
    let state = AppState::new(
        rack,
        ServiceConfig { data_dir: args.data_dir.clone(), llm: args.llm, stub_script: args.stub_script.clone() },
    );
    let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
    runtime_.block_on(async {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.listen, args.port)).await.map_err(runtime)?;
        println!("API on http://{}/v1/", listener.local_addr().map_err(runtime)?);
        crate::service::serve(listener, state).await.map_err(runtime)
    })
}

/// First `replay`, `replay-2`, ... that does not exist yet.
fn fresh_replay_dir(session_dir: &Path) -> PathBuf {
    (1..)
        .map(|n| session_dir.join(if n == 1 { "replay".to_string() } else { format!("replay-{n}") }))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let path = if args.session.is_dir() { args.session.join(SESSION_FILE) } else { args.session.clone() };
    let recorded = load_session(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let dir = args.out.clone().unwrap_or_else(|| fresh_replay_dir(path.parent().unwrap_or(Path::new("."))));

    let (mut agent, _rack) = replay_agent(&recorded, &dir)?;
    loop {
        let state = agent.run().map_err(runtime)?.clone();
        if state != SessionState::AwaitingApproval {
            break;
        }
        let i = agent.session().iterations.len() - 1;
        match recorded.iterations.get(i).map(|it| &it.approval) {
            Some(Approval::Approved { by, .. }) => agent.approve(by).map_err(runtime)?,
            Some(Approval::Rejected { by, reason, .. }) => agent.reject(by, reason).map_err(runtime)?,
            _ => break,
        }
    }

    let replayed = agent.session();
    println!("replayed into {}", dir.display());
    match first_divergence(&recorded.transcript, &replayed.transcript) {
        None if replayed.state == recorded.state => {
            println!("transcript identical ({} messages), final state {}", replayed.transcript.len(), replayed.state);
            Ok(())
        }
        None => Err(runtime(format!("final state differs: recorded {}, replayed {}", recorded.state, replayed.state))),
        Some(i) => Err(runtime(format!("transcripts diverge at message {}", i + 1))),
    }
}

fn first_divergence(a: &[ChatMessage], b: &[ChatMessage]) -> Option<usize> {
    (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i))
}

/// Rebuilds the recorded session's agent against a private rack on the
/// recorded ports, answering with the recorded assistant turns.
fn replay_agent(recorded: &AgentSession, dir: &Path) -> Result<(Agent, Rack), CliError> {
    let port = |kind| recorded.resources.iter().find(|r| r.kind == kind).map(|r| r.resource_id.port);
    let config = RackConfig {
        bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
        smu_port: port(InstrumentKind::ScpiSmu),
        stage_port: port(InstrumentKind::XypStage),
        ..RackConfig::default()
    };
    let clock: SharedClock = VirtualClock::shared();
    let rack = Rack::up(config, clock.clone()).map_err(runtime)?;

    let replies = recorded.transcript.iter().filter(|m| m.role == Role::Assistant).map(|m| m.content.clone());
    let system_prompt = recorded.transcript.first().filter(|m| m.role == Role::System).map(|m| m.content.clone());
    let mut config = AgentConfig {
        id: Some(recorded.id.clone()),
        mode: recorded.mode,
        max_iters: recorded.max_iters,
        model: recorded.model.clone(),
        ..AgentConfig::new(&recorded.goal, recorded.predicate.clone())
    };
    if let Some(p) = system_prompt {
        config.system_prompt = p;
    }
    let agent = open_agent_in(
        config,
        rack.list_resources(),
        dir,
        Box::new(ScriptedStub::from_replies(replies)),
        clock,
        Box::new(Narrator),
    )
    .map_err(runtime)?;
    Ok((agent, rack))
}
