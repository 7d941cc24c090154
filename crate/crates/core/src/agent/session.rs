use std::fmt;

use serde::{Deserialize, Serialize};

use super::predicate::Predicate;
use crate::labscript::ExecutionResult;
use crate::llm::ChatMessage;
use crate::transport::ResourceDescriptor;

pub const SESSION_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_ITERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    #[default]
    Auto,
    /// Every proposed script waits for operator approval.
    Step,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Mode::Auto),
            "step" => Ok(Mode::Step),
            other => Err(format!("unknown mode '{other}', expected auto or step")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state")]
pub enum SessionState {
    Running,
    AwaitingApproval,
    Succeeded,
    Failed { reason: String },
}

impl SessionState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Succeeded | SessionState::Failed { .. })
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Running => f.write_str("Running"),
            SessionState::AwaitingApproval => f.write_str("AwaitingApproval"),
            SessionState::Succeeded => f.write_str("Succeeded"),
            SessionState::Failed { reason } => write!(f, "Failed({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Approval {
    NotRequired,
    Pending,
    Approved { by: String, at: String },
    Rejected { by: String, reason: String, at: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    /// 1-based.
    pub index: usize,
    /// Empty when the reply had no usable code block.
    pub proposed_code: String,
    pub done_claimed: bool,
    pub approval: Approval,
    pub exec: Option<ExecutionResult>,
    pub artifact_path: String,
}

pub fn artifact_name(index: usize) -> String {
    format!("autolab_code_iter{index}.labs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSession {
    pub version: u32,
    pub id: String,
    pub goal: String,
    pub mode: Mode,
    pub max_iters: usize,
    pub model: String,
    pub predicate: Predicate,
    pub resources: Vec<ResourceDescriptor>,
    /// System message first, then alternating assistant replies and user
    /// feedback after the initial user message.
    pub transcript: Vec<ChatMessage>,
    pub iterations: Vec<Iteration>,
    pub state: SessionState,
}
