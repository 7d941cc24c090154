use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use serde_json::json;
use thiserror::Error;

use super::extract::{extract_code_block, Extracted};
use super::predicate::{evaluate_success, Predicate};
use super::prompt::{compose_messages, initial_user_message, DEFAULT_SYSTEM_PROMPT};
use super::session::{
    artifact_name, AgentSession, Approval, Iteration, Mode, SessionState, DEFAULT_MAX_ITERS, SESSION_FORMAT_VERSION,
};
use crate::events::{EventKind, EventSink};
use crate::labscript::{ExecutionResult, Sandbox};
use crate::llm::{ChatBackend, ChatMessage, ChatRequest};
use crate::transport::ResourceDescriptor;

pub const SESSION_FILE: &str = "session.json";
pub const WORK_DIR: &str = "work";
const LLM_ATTEMPTS: usize = 2;

/// Executes proposed code. The sandbox is the production runner; tests wrap
/// it to count executions.
pub trait CodeRunner: Send {
    fn run(&mut self, code: &str) -> ExecutionResult;
    fn workdir(&self) -> &Path;
}

impl CodeRunner for Sandbox {
    fn run(&mut self, code: &str) -> ExecutionResult {
        self.run_source(code)
    }

    fn workdir(&self) -> &Path {
        &self.workdir
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{0}")]
    Conflict(&'static str),
    #[error("cannot persist session: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub id: Option<String>,
    pub goal: String,
    pub mode: Mode,
    pub max_iters: usize,
    pub model: String,
    pub system_prompt: String,
    pub predicate: Predicate,
}

impl AgentConfig {
    pub fn new(goal: impl Into<String>, predicate: Predicate) -> Self {
        Self {
            id: None,
            goal: goal.into(),
            mode: Mode::Auto,
            max_iters: DEFAULT_MAX_ITERS,
            model: "stub".into(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.trim_end().to_string(),
            predicate,
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Session directory for `id` under a data directory.
pub fn session_dir(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join("sessions").join(id)
}

pub fn new_session_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// One agent session with its LLM backend, code runner and event sink.
/// State changes are persisted to `session.json` as they happen.
pub struct Agent {
    session: AgentSession,
    backend: Box<dyn ChatBackend>,
    runner: Box<dyn CodeRunner>,
    sink: Box<dyn EventSink>,
    dir: PathBuf,
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        resources: Vec<ResourceDescriptor>,
        dir: impl Into<PathBuf>,
        backend: Box<dyn ChatBackend>,
        runner: Box<dyn CodeRunner>,
        sink: Box<dyn EventSink>,
    ) -> Result<Self, AgentError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let first = initial_user_message(&config.goal, &resources, &config.predicate);
        let session = AgentSession {
            version: SESSION_FORMAT_VERSION,
            id: config.id.unwrap_or_else(new_session_id),
            goal: config.goal,
            mode: config.mode,
            max_iters: config.max_iters.max(1),
            model: config.model,
            predicate: config.predicate,
            resources,
            transcript: vec![ChatMessage::system(config.system_prompt), ChatMessage::user(first)],
            iterations: Vec::new(),
            state: SessionState::Running,
        };
        let agent = Self { session, backend, runner, sink, dir };
        agent.persist()?;
        Ok(agent)
    }

    pub fn session(&self) -> &AgentSession {
        &self.session
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Steps until the session ends or parks awaiting approval.
    pub fn run(&mut self) -> Result<&SessionState, AgentError> {
        while self.session.state == SessionState::Running {
            self.step()?;
        }
        Ok(&self.session.state)
    }

    /// One loop turn: ask the model, extract code, then execute it (AUTO)
    /// or park for approval (STEP).
    pub fn step(&mut self) -> Result<(), AgentError> {
        if self.session.state != SessionState::Running {
            return Err(AgentError::Conflict("session is not running"));
        }
        let index = self.session.iterations.len() + 1;
        self.emit(EventKind::IterationStarted, json!({ "index": index }));

        let mut request = ChatRequest::new(self.session.model.clone(), compose_messages(&self.session));
        request.temperature = 0.0;
        let mut reply = None;
        for attempt in 1..=LLM_ATTEMPTS {
            match self.backend.complete(&request) {
                Ok(text) => {
                    reply = Some(text);
                    break;
                }
                Err(e) => warn!("session {}: llm call {attempt} failed: {e}", self.session.id),
            }
        }
        let Some(reply) = reply else {
            return self.terminate(SessionState::Failed { reason: "llm unavailable".into() });
        };
        self.session.transcript.push(ChatMessage::assistant(reply.clone()));

        let extracted = extract_code_block(&reply);
        let (code, done) = match &extracted {
            Ok(e) => (e.code.clone(), e.done),
            Err(_) => (String::new(), false),
        };
        let artifact_path = artifact_name(index);
        fs::write(self.dir.join(&artifact_path), &code)?;
        self.session.iterations.push(Iteration {
            index,
            proposed_code: code.clone(),
            done_claimed: done,
            approval: if self.session.mode == Mode::Step && extracted.is_ok() {
                Approval::Pending
            } else {
                Approval::NotRequired
            },
            exec: None,
            artifact_path: artifact_path.clone(),
        });
        self.emit(
            EventKind::CodeProposed,
            json!({ "index": index, "code": code, "done": done, "artifact": artifact_path }),
        );

        match extracted {
            Err(e) => {
                let text = format!(
                    "Iteration {index}: {e}. Reply with exactly one ```labscript fenced block containing the script."
                );
                self.feedback(index, text)?;
                self.after_iteration(false)
            }
            Ok(_) if self.session.mode == Mode::Step => {
                self.session.state = SessionState::AwaitingApproval;
                self.persist()?;
                self.emit(EventKind::AwaitingApproval, json!({ "index": index, "code": code }));
                Ok(())
            }
            Ok(e) => self.execute(index, e),
        }
    }

    pub fn approve(&mut self, by: &str) -> Result<(), AgentError> {
        if self.session.state != SessionState::AwaitingApproval {
            return Err(AgentError::Conflict("not awaiting approval"));
        }
        let iteration = self.session.iterations.last_mut().expect("pending iteration");
        iteration.approval = Approval::Approved { by: by.to_string(), at: now() };
        let index = iteration.index;
        // re-extract so warnings reach the feedback message
        let reply = self.session.transcript.last().map(|m| m.content.clone()).unwrap_or_default();
        let extracted = extract_code_block(&reply).expect("pending iteration has code");
        self.session.state = SessionState::Running;
        self.execute(index, extracted)
    }

    /// Rejection consumes the iteration without executing anything.
    pub fn reject(&mut self, by: &str, reason: &str) -> Result<(), AgentError> {
        if self.session.state != SessionState::AwaitingApproval {
            return Err(AgentError::Conflict("not awaiting approval"));
        }
        let iteration = self.session.iterations.last_mut().expect("pending iteration");
        iteration.approval = Approval::Rejected { by: by.to_string(), reason: reason.to_string(), at: now() };
        let index = iteration.index;
        self.session.state = SessionState::Running;
        self.feedback(index, format!("Operator rejected: {reason}"))?;
        self.after_iteration(false)
    }

    /// Operator override for sessions whose predicate needs a human verdict.
    pub fn mark_succeeded(&mut self) -> Result<(), AgentError> {
        if self.session.state.is_terminal() {
            return Err(AgentError::Conflict("session already finished"));
        }
        self.terminate(SessionState::Succeeded)
    }

    fn execute(&mut self, index: usize, extracted: Extracted) -> Result<(), AgentError> {
        let result = self.runner.run(&extracted.code);
        self.emit(
            EventKind::Executed,
            json!({
                "index": index,
                "exit": result.exit.to_string(),
                "records": result.records.len(),
                "saved_files": result.saved_files,
                "instructions": result.instructions_executed,
            }),
        );
        let passed = evaluate_success(&self.session.predicate, Some(&result), self.runner.workdir());
        let mut text = format!(
            "Iteration {index} executed.\nexit: {}\nrecords: {}\nsaved files: {}\n",
            result.exit,
            result.records.len(),
            if result.saved_files.is_empty() { "none".to_string() } else { result.saved_files.join(", ") },
        );
        text.push_str(&format!("stdout:\n{}", result.stdout));
        if !result.stdout.is_empty() && !result.stdout.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&format!("stderr:\n{}", result.stderr));
        for w in &extracted.warnings {
            text.push_str(&format!("\nwarning: {w}"));
        }
        if extracted.done && !passed {
            text.push_str(&format!(
                "\nDONE not accepted: the success check failed ({}).",
                self.session.predicate.describe()
            ));
        }
        self.session.iterations[index - 1].exec = Some(result);
        self.feedback(index, text)?;
        self.after_iteration(extracted.done && passed)
    }

    fn feedback(&mut self, index: usize, text: String) -> Result<(), AgentError> {
        self.session.transcript.push(ChatMessage::user(text.clone()));
        self.persist()?;
        self.emit(EventKind::Feedback, json!({ "index": index, "content": text }));
        Ok(())
    }

    fn after_iteration(&mut self, succeeded: bool) -> Result<(), AgentError> {
        if succeeded {
            self.terminate(SessionState::Succeeded)
        } else if self.session.iterations.len() >= self.session.max_iters {
            self.terminate(SessionState::Failed { reason: "max iterations".into() })
        } else {
            self.persist()
        }
    }

    fn terminate(&mut self, state: SessionState) -> Result<(), AgentError> {
        self.session.state = state;
        self.persist()?;
        let (name, reason) = match &self.session.state {
            SessionState::Failed { reason } => ("Failed", Some(reason.clone())),
            _ => ("Succeeded", None),
        };
        self.emit(
            EventKind::SessionTerminal,
            json!({ "state": name, "reason": reason, "iterations": self.session.iterations.len() }),
        );
        Ok(())
    }

    fn emit(&self, kind: EventKind, payload: serde_json::Value) {
        self.sink.emit(kind, payload);
    }

    fn persist(&self) -> Result<(), AgentError> {
        let tmp = self.dir.join(format!("{SESSION_FILE}.tmp"));
        let json = serde_json::to_string_pretty(&self.session).expect("session serializes");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, self.dir.join(SESSION_FILE))?;
        Ok(())
    }
}

/// Reads a persisted session.
pub fn load_session(path: &Path) -> io::Result<AgentSession> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
