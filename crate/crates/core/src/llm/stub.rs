use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, LlmError, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    pub contains: String,
    pub reply: String,
}

/// Stub script file: `{"replies": [...], "matchers": [{"contains", "reply"}]}`
/// or a bare array of replies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubScript {
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub matchers: Vec<Matcher>,
}

/// Deterministic backend. A matcher whose substring occurs in the trailing
/// user messages answers first and does not advance the reply cursor;
/// otherwise the next canned reply is returned.
#[derive(Debug, Clone)]
pub struct ScriptedStub {
    replies: VecDeque<String>,
    matchers: Vec<Matcher>,
    served: usize,
}

impl ScriptedStub {
    pub fn new(script: StubScript) -> Self {
        Self { replies: script.replies.into(), matchers: script.matchers, served: 0 }
    }

    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(StubScript { replies: replies.into_iter().map(Into::into).collect(), matchers: Vec::new() })
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LlmError::Decode(e.to_string()))?;
        let script = if value.is_array() {
            StubScript { replies: serde_json::from_value(value).map_err(|e| LlmError::Decode(e.to_string()))?, ..Default::default() }
        } else {
            serde_json::from_value(value).map_err(|e| LlmError::Decode(e.to_string()))?
        };
        Ok(Self::new(script))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read stub script {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn served(&self) -> usize {
        self.served
    }

    pub fn remaining(&self) -> usize {
        self.replies.len()
    }
}

impl ChatBackend for ScriptedStub {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        // user messages after the last assistant turn: feedback plus reminder
        let recent: Vec<&str> = request
            .messages
            .iter()
            .rev()
            .take_while(|m| m.role != Role::Assistant)
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect();
        let hit = self.matchers.iter().find(|m| recent.iter().any(|c| c.contains(&m.contains)));
        let reply = match hit {
            Some(m) => m.reply.clone(),
            None => self.replies.pop_front().ok_or(LlmError::StubExhausted { served: self.served })?,
        };
        self.served += 1;
        Ok(reply)
    }
}
