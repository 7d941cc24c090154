//! Desk-scale laboratory automation: a virtual instrument rack served over
//! TCP, a serpentine raster scan engine, the LabScript sandbox, and an LLM
//! agent loop that writes and repairs instrument scripts.

pub mod agent;
pub mod clock;
pub mod events;
pub mod format;
pub mod labscript;
pub mod llm;
pub mod scan;
pub mod scene;
pub mod scpi;
pub mod stage;
pub mod transport;
