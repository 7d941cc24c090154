//! The virtual instrument rack: SMU and stage listeners plus the resource
//! registry describing them.

use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::resource::{InstrumentKind, ResourceDescriptor, ResourceId};
use super::server::{Instrument, InstrumentServer, SharedInstrument};
use crate::clock::SharedClock;
use crate::format::sci6;
use crate::scene::{Scene, SceneError};
use crate::scpi::{dispatch, is_measurement, measure_current, parse_scpi, DeviceModel, SmuState, ERR_SYNTAX};
use crate::stage::{StageConfig, StageSim};

pub const DEFAULT_SMU_PORT: u16 = 5025;
pub const DEFAULT_STAGE_PORT: u16 = 5026;
pub const DEFAULT_SCENE_PITCH_UM: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the additive current noise, amperes.
    pub sigma_amps: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum SceneSource {
    File { path: PathBuf, pitch_um: f64 },
    Loaded(Scene),
}

#[derive(Debug, Clone)]
pub struct RackConfig {
    pub bind: IpAddr,
    /// `None` disables the instrument; `Some(0)` picks a free port.
    pub smu_port: Option<u16>,
    pub stage_port: Option<u16>,
    pub device: DeviceModel,
    pub stage: StageConfig,
    pub scene: Option<SceneSource>,
    pub noise: Option<NoiseConfig>,
    /// How long a new client waits for the previous one to disconnect
    /// before being refused as busy.
    pub busy_grace: Duration,
}

impl Default for RackConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            smu_port: Some(DEFAULT_SMU_PORT),
            stage_port: Some(DEFAULT_STAGE_PORT),
            // 1 kOhm when fully lit
            device: DeviceModel::Photoconductor { r_dark: 10_000.0, sensitivity_k: 9.0, irradiance: 1.0 },
            stage: StageConfig::default(),
            scene: None,
            noise: None,
            busy_grace: Duration::from_millis(500),
        }
    }
}

impl RackConfig {
    /// Default instruments on OS-assigned ports.
    pub fn ephemeral() -> Self {
        Self { smu_port: Some(0), stage_port: Some(0), ..Self::default() }
    }
}

#[derive(Debug, Error)]
pub enum RackError {
    #[error("port {port} is already in use")]
    AddressInUse { port: u16 },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid device model: {0}")]
    Device(#[from] crate::scpi::DeviceError),
    #[error("the scene needs a stage to follow")]
    SceneWithoutStage,
    #[error("failed to start listener thread: {0}")]
    Spawn(std::io::Error),
}

/// Light path from the scene to the photodetector: the device sees the
/// reflectance under the stage's live position.
struct LightPath {
    scene: Scene,
    stage: Arc<Mutex<StageSim>>,
}

pub struct SmuInstrument {
    state: SmuState,
    device: DeviceModel,
    light: Option<LightPath>,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
}

impl SmuInstrument {
    pub fn new(device: DeviceModel) -> Self {
        Self { state: SmuState::default(), device, light: None, noise: None }
    }

    pub fn state(&self) -> &SmuState {
        &self.state
    }

    pub fn device(&self) -> &DeviceModel {
        &self.device
    }
}

impl Instrument for SmuInstrument {
    fn handle_line(&mut self, line: &str) -> Vec<String> {
        let cmds = match parse_scpi(line) {
            Ok(c) => c,
            Err(_) => {
                self.state.push_error(ERR_SYNTAX);
                return Vec::new();
            }
        };
        let mut out = Vec::new();
        for cmd in &cmds {
            let measuring = is_measurement(cmd);
            if measuring {
                if let Some(light) = &self.light {
                    let pose = light.stage.lock().unwrap().pose();
                    self.device.set_irradiance(light.scene.reflectance_at(pose));
                }
            }
            let Some(mut resp) = dispatch(&mut self.state, &self.device, cmd) else {
                continue;
            };
            if let (true, Some((dist, rng))) = (measuring && !resp.is_empty() && self.state.output_on, &mut self.noise) {
                let limit = self.state.current_limit();
                let noisy = measure_current(&self.state, &self.device) + dist.sample(rng);
                resp = sci6(noisy.clamp(-limit, limit));
            }
            out.push(resp);
        }
        out
    }
}

struct StageInstrument(Arc<Mutex<StageSim>>);

impl Instrument for StageInstrument {
    fn handle_line(&mut self, line: &str) -> Vec<String> {
        vec![self.0.lock().unwrap().handle_line(line)]
    }
}

/// A running rack. Dropping it stops the listeners.
pub struct Rack {
    resources: Vec<ResourceDescriptor>,
    servers: Vec<InstrumentServer>,
    smu: Option<Arc<Mutex<SmuInstrument>>>,
    stage: Option<Arc<Mutex<StageSim>>>,
    clock: SharedClock,
}

fn bind(ip: IpAddr, port: u16) -> Result<TcpListener, RackError> {
    let addr = SocketAddr::new(ip, port);
    TcpListener::bind(addr).map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            RackError::AddressInUse { port }
        } else {
            RackError::Bind { addr, source }
        }
    })
}

impl Rack {
    /// Loads the scene, binds every enabled listener and starts serving.
    pub fn up(config: RackConfig, clock: SharedClock) -> Result<Self, RackError> {
        config.device.validate()?;
        let scene = match config.scene {
            None => None,
            Some(SceneSource::Loaded(s)) => Some(s),
            Some(SceneSource::File { path, pitch_um }) => Some(Scene::load_pgm(&path, pitch_um)?),
        };
        if scene.is_some() && config.stage_port.is_none() {
            return Err(RackError::SceneWithoutStage);
        }
        // bind everything before spawning so a port clash leaves nothing running
        let smu_listener = config.smu_port.map(|p| bind(config.bind, p)).transpose()?;
        let stage_listener = config.stage_port.map(|p| bind(config.bind, p)).transpose()?;

        let host = config.bind.to_string();
        let mut rack = Rack { resources: Vec::new(), servers: Vec::new(), smu: None, stage: None, clock: clock.clone() };

        let stage = stage_listener
            .as_ref()
            .map(|_| Arc::new(Mutex::new(StageSim::new(config.stage, clock.clone()))));

        if let Some(listener) = smu_listener {
            let mut smu = SmuInstrument::new(config.device.clone());
            if let (Some(scene), Some(stage)) = (scene, &stage) {
                smu.light = Some(LightPath { scene, stage: stage.clone() });
            }
            if let Some(n) = config.noise.filter(|n| n.sigma_amps > 0.0) {
                let dist = Normal::new(0.0, n.sigma_amps).expect("finite sigma");
                smu.noise = Some((dist, ChaCha8Rng::seed_from_u64(n.seed)));
            }
            let smu = Arc::new(Mutex::new(smu));
            let shared: SharedInstrument = smu.clone();
            let server = InstrumentServer::spawn(listener, shared, config.busy_grace, "smu").map_err(RackError::Spawn)?;
            rack.resources.push(ResourceDescriptor {
                resource_id: ResourceId::new(host.clone(), server.local_addr().port()),
                kind: InstrumentKind::ScpiSmu,
                label: "Source-measure unit (Model 2450 simulant)".into(),
            });
            rack.servers.push(server);
            rack.smu = Some(smu);
        }

        if let (Some(listener), Some(stage)) = (stage_listener, stage) {
            let shared: SharedInstrument = Arc::new(Mutex::new(StageInstrument(stage.clone())));
            let server = InstrumentServer::spawn(listener, shared, config.busy_grace, "stage").map_err(RackError::Spawn)?;
            rack.resources.push(ResourceDescriptor {
                resource_id: ResourceId::new(host, server.local_addr().port()),
                kind: InstrumentKind::XypStage,
                label: "XY motorized stage".into(),
            });
            rack.servers.push(server);
            rack.stage = Some(stage);
        }
        Ok(rack)
    }

    /// Registered instruments, SMU first, then stage.
    pub fn list_resources(&self) -> Vec<ResourceDescriptor> {
        self.resources.clone()
    }

    pub fn resource(&self, kind: InstrumentKind) -> Option<&ResourceDescriptor> {
        self.resources.iter().find(|r| r.kind == kind)
    }

    pub fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    /// Direct handle on the SMU model, for inspection in tests and demos.
    pub fn smu(&self) -> Option<Arc<Mutex<SmuInstrument>>> {
        self.smu.clone()
    }

    pub fn stage(&self) -> Option<Arc<Mutex<StageSim>>> {
        self.stage.clone()
    }

    pub fn shutdown(&mut self) {
        for s in &mut self.servers {
            s.shutdown();
        }
    }
}

impl Drop for Rack {
    fn drop(&mut self) {
        self.shutdown();
    }
}
