use super::predicate::Predicate;
use super::session::AgentSession;
use crate::llm::ChatMessage;
use crate::transport::ResourceDescriptor;

/// Default system prompt; deployments may replace it from a file.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../../config/system_prompt.txt");

pub const LANGUAGE_GUIDE: &str = "\
LabScript, one statement per line, `#` starts a comment:
  OPEN <alias> \"<resource>\" [SCPI|XYP]      connect to an instrument
  WRITE <alias> \"<command>\"                send a command
  QUERY <alias> \"<command>\" -> <var>       send a query, bind the reply (number if numeric)
  MOVE <alias> <x_um>, <y_um>               start a stage move
  WAITIDLE <alias> [<timeout_ms>]           wait until the stage stops
  SET <var> = <expr>                        arithmetic with + - * / and parentheses
  SWEEP <var> FROM <a> TO <b> STEP <s>      loop, inclusive of <b>; close with END
  END
  RECORD <expr>, <expr>, ...                append a data row
  SAVE \"<file>.csv\"                         write all rows (relative path only)
  PRINT \"<text>\"                            print; `{var}` interpolates in any string
SMU (SCPI): *IDN?  *RST  :SOUR:FUNC VOLT  :SOUR:VOLT <V>  :SOUR:VOLT:ILIM <A>
  :SENS:FUNC \"CURR\"  :OUTP ON|OFF  :READ?  :MEAS:CURR?  :SYST:ERR?
Stage (XYP): MOVE <x> <y>  HOME  POS?  STATUS?  LIMITS?   (micrometres)";

pub const RULES: &str = "\
Rules:
- Reply with exactly one ```labscript fenced code block; it is executed as is.
- The SMU error queue is read after every SCPI command; errors come back to you on stderr.
- Files may only be written inside the working directory.
- When the goal is achieved, reply DONE together with the final code block.";

pub fn reminder(goal: &str) -> String {
    format!("Goal: {goal}. Continue building and refining the script until complete. Reply DONE plus a final code block when finished.")
}

pub fn initial_user_message(goal: &str, resources: &[ResourceDescriptor], predicate: &Predicate) -> String {
    let mut listing = String::new();
    for r in resources {
        listing.push_str(&format!("  {}  {}  {}\n", r.resource_id, r.kind, r.label));
    }
    if listing.is_empty() {
        listing.push_str("  (none)\n");
    }
    format!(
        "Goal: {goal}\n\nInstruments:\n{listing}\n{LANGUAGE_GUIDE}\n\n{RULES}\nSuccess is checked independently: {}.",
        predicate.describe()
    )
}

/// The transcript plus, once at least one iteration exists, a trailing goal
/// reminder. The reminder is never stored in the transcript.
pub fn compose_messages(session: &AgentSession) -> Vec<ChatMessage> {
    let mut messages = session.transcript.clone();
    if !session.iterations.is_empty() {
        messages.push(ChatMessage::user(reminder(&session.goal)));
    }
    messages
}
