//! The agent loop: prompt composition, code extraction, optional operator
//! approval, sandboxed execution and feedback, with every iteration
//! persisted to the session directory.

mod engine;
mod extract;
mod predicate;
mod prompt;
mod session;

pub use engine::{
    load_session, new_session_id, session_dir, Agent, AgentConfig, AgentError, CodeRunner, SESSION_FILE, WORK_DIR,
};
pub use extract::{extract_code_block, ExtractError, Extracted, CODE_LABEL};
pub use predicate::{evaluate_success, Predicate};
pub use prompt::{compose_messages, initial_user_message, reminder, DEFAULT_SYSTEM_PROMPT, LANGUAGE_GUIDE, RULES};
pub use session::{
    artifact_name, AgentSession, Approval, Iteration, Mode, SessionState, DEFAULT_MAX_ITERS, SESSION_FORMAT_VERSION,
};
