//! Network exposure of the virtual instruments.

mod client;
mod rack;
mod resource;
mod server;

pub use client::{ClientError, LineClient, ScpiClient, StageClient};
pub use rack::{
    NoiseConfig, Rack, RackConfig, RackError, SceneSource, SmuInstrument, DEFAULT_SCENE_PITCH_UM, DEFAULT_SMU_PORT,
    DEFAULT_STAGE_PORT,
};
pub use resource::{InstrumentKind, ResourceDescriptor, ResourceId, ResourceIdError};
pub use server::{session_loop, Instrument, InstrumentServer, SharedInstrument, BUSY_REPLY};
