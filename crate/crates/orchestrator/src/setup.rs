//! Construction shared by the CLI and the HTTP service, so both drive the
//! same core code with the same defaults.

use std::fmt;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use autolab_core::agent::{session_dir, Agent, AgentConfig, Predicate, WORK_DIR};
use autolab_core::clock::SharedClock;
use autolab_core::events::EventSink;
use autolab_core::labscript::{Limits, Sandbox};
use autolab_core::llm::{ChatBackend, HttpBackend, ScriptedStub};
use autolab_core::scan::{run_scan, Frame, ScanOptions, ScanPlan};
use autolab_core::scene::Scene;
use autolab_core::scpi::DeviceModel;
use autolab_core::transport::{InstrumentKind, NoiseConfig, RackConfig, ResourceDescriptor, SceneSource, ScpiClient, StageClient};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Side length of the built-in scenes, in pixels.
pub const BUILTIN_SCENE_PX: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LlmChoice {
    Stub,
    #[default]
    Http,
}

impl fmt::Display for LlmChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LlmChoice::Stub => "stub",
            LlmChoice::Http => "http",
        })
    }
}

/// Rack settings common to `rack up`, `agent run` and `serve`.
#[derive(Debug, Clone, clap::Args)]
pub struct RackArgs {
    /// SMU listener port; 0 picks a free one.
    #[arg(long, default_value_t = autolab_core::transport::DEFAULT_SMU_PORT)]
    pub smu_port: u16,
    /// Stage listener port; 0 picks a free one.
    #[arg(long, default_value_t = autolab_core::transport::DEFAULT_STAGE_PORT)]
    pub stage_port: u16,
    #[command(flatten)]
    pub bench: BenchArgs,
    /// Listen address for the instruments. Anything but loopback exposes them to the network.
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
}

/// What sits in front of the SMU and how noisy it is.
#[derive(Debug, Clone, clap::Args)]
pub struct BenchArgs {
    /// Scene under the stage: `logo`, `checkerboard` or a PGM file.
    #[arg(long)]
    pub scene: Option<String>,
    /// Scene pixel size in micrometres.
    #[arg(long, default_value_t = autolab_core::transport::DEFAULT_SCENE_PITCH_UM)]
    pub scene_pitch: f64,
    /// Standard deviation of additive current noise in amperes; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Seed of the noise generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the photoresistor with a plain resistor of this many ohms.
    #[arg(long)]
    pub ohmic: Option<f64>,
}

impl BenchArgs {
    pub fn apply(&self, mut config: RackConfig) -> RackConfig {
        config.scene = self.scene.as_deref().map(|s| scene_source(s, self.scene_pitch));
        if self.noise > 0.0 {
            config.noise = Some(NoiseConfig { sigma_amps: self.noise, seed: self.seed });
        }
        if let Some(resistance) = self.ohmic {
            config.device = DeviceModel::Ohmic { resistance };
        }
        config
    }
}

impl RackArgs {
    pub fn config(&self) -> RackConfig {
        let base = RackConfig {
            bind: self.bind,
            smu_port: Some(self.smu_port),
            stage_port: Some(self.stage_port),
            ..RackConfig::default()
        };
        self.bench.apply(base)
    }
}

pub fn scene_source(arg: &str, pitch_um: f64) -> SceneSource {
    match arg {
        "logo" => SceneSource::Loaded(Scene::logo(BUILTIN_SCENE_PX, BUILTIN_SCENE_PX, pitch_um)),
        "checkerboard" => SceneSource::Loaded(Scene::checkerboard(BUILTIN_SCENE_PX, BUILTIN_SCENE_PX, pitch_um)),
        path => SceneSource::File { path: PathBuf::from(path), pitch_um },
    }
}

/// Used when neither the request nor the stub script names one.
pub fn default_predicate() -> Predicate {
    Predicate::RecordsAtLeast { n: 1 }
}

/// Accepts `manual`, `records:N`, `file-rows:PATH:N` or a JSON object.
pub fn parse_predicate(text: &str) -> Result<Predicate, String> {
    let text = text.trim();
    if text.starts_with('{') {
        return serde_json::from_str(text).map_err(|e| format!("bad predicate JSON: {e}"));
    }
    let count = |n: &str| n.parse::<usize>().map_err(|_| format!("bad row count '{n}' in predicate"));
    if text == "manual" {
        Ok(Predicate::AlwaysManual)
    } else if let Some(n) = text.strip_prefix("records:") {
        Ok(Predicate::RecordsAtLeast { n: count(n)? })
    } else if let Some((path, n)) = text.strip_prefix("file-rows:").and_then(|r| r.rsplit_once(':')) {
        Ok(Predicate::FileRows { path: path.to_string(), min_rows: count(n)? })
    } else {
        Err(format!("unknown predicate '{text}' (expected manual, records:N, file-rows:PATH:N or JSON)"))
    }
}

/// A stub script plus the optional `predicate` key a scenario file may carry.
pub fn stub_from_value(value: &Value) -> Result<(ScriptedStub, Option<Predicate>), String> {
    let predicate = match value.get("predicate") {
        Some(p) => Some(serde_json::from_value(p.clone()).map_err(|e| format!("bad predicate in stub script: {e}"))?),
        None => None,
    };
    let stub = ScriptedStub::from_json(&value.to_string()).map_err(|e| e.to_string())?;
    Ok((stub, predicate))
}

pub fn load_stub(path: &Path) -> Result<(ScriptedStub, Option<Predicate>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read stub script {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("stub script {}: {e}", path.display()))?;
    stub_from_value(&value)
}

pub struct LlmSetup {
    pub backend: Box<dyn ChatBackend>,
    pub model: String,
    /// Predicate carried by the stub script, if any.
    pub predicate: Option<Predicate>,
}

/// Picks the chat backend. An inline stub script wins over `choice`, then
/// the stub script file.
pub fn llm_setup(choice: LlmChoice, inline: Option<&Value>, script: Option<&Path>) -> Result<LlmSetup, String> {
    let (stub, predicate) = match (choice, inline, script) {
        (_, Some(v), _) => stub_from_value(v)?,
        (LlmChoice::Stub, None, Some(path)) => load_stub(path)?,
        (LlmChoice::Stub, None, None) => return Err("the stub backend needs a stub script".into()),
        (LlmChoice::Http, None, _) => {
            let backend = HttpBackend::from_env().map_err(|e| e.to_string())?;
            return Ok(LlmSetup { backend: Box::new(backend), model: HttpBackend::model_from_env(), predicate: None });
        }
    };
    Ok(LlmSetup { backend: Box::new(stub), model: "stub".into(), predicate })
}

/// Creates the session directory and sandbox and wires up the agent.
pub fn open_agent(
    mut config: AgentConfig,
    resources: Vec<ResourceDescriptor>,
    data_dir: &Path,
    backend: Box<dyn ChatBackend>,
    clock: SharedClock,
    sink: Box<dyn EventSink>,
) -> Result<Agent, String> {
    let id = config.id.get_or_insert_with(autolab_core::agent::new_session_id).clone();
    open_agent_in(config, resources, &session_dir(data_dir, &id), backend, clock, sink)
}

pub fn open_agent_in(
    config: AgentConfig,
    resources: Vec<ResourceDescriptor>,
    dir: &Path,
    backend: Box<dyn ChatBackend>,
    clock: SharedClock,
    sink: Box<dyn EventSink>,
) -> Result<Agent, String> {
    let sandbox = Sandbox::new(dir.join(WORK_DIR), Limits::default(), clock, resources.clone())
        .map_err(|e| format!("cannot create sandbox in {}: {e}", dir.display()))?;
    Agent::new(config, resources, dir, backend, Box::new(sandbox), sink).map_err(|e| e.to_string())
}

fn find(resources: &[ResourceDescriptor], kind: InstrumentKind) -> Result<&ResourceDescriptor, String> {
    resources.iter().find(|r| r.kind == kind).ok_or_else(|| format!("rack has no {kind}"))
}

/// Connects to the rack's SMU and stage and runs one acquisition.
pub fn acquire(plan: &ScanPlan, resources: &[ResourceDescriptor], clock: &SharedClock, sink: &dyn EventSink) -> Result<Frame, String> {
    let smu_id = &find(resources, InstrumentKind::ScpiSmu)?.resource_id;
    let stage_id = &find(resources, InstrumentKind::XypStage)?.resource_id;
    let mut smu = ScpiClient::connect(smu_id).map_err(|e| format!("SMU {smu_id}: {e}"))?;
    let mut stage = StageClient::connect(stage_id).map_err(|e| format!("stage {stage_id}: {e}"))?;
    let frame = run_scan(plan, &mut smu, &mut stage, clock, sink, ScanOptions::default()).map_err(|e| e.to_string());
    smu.close();
    stage.close();
    frame
}
