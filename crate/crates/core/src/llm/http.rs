use std::fmt;
use std::time::Duration;

use serde::Deserialize;

use super::{ChatBackend, ChatRequest, LlmError};

pub const ENV_URL: &str = "AUTOLAB_LLM_URL";
pub const ENV_MODEL: &str = "AUTOLAB_LLM_MODEL";
pub const ENV_API_KEY: &str = "AUTOLAB_LLM_API_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4o";
const SNIPPET_CHARS: usize = 200;

/// Blocking client for an endpoint that accepts
/// `{model, messages, temperature}` and answers `choices[0].message.content`.
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

// the key must never reach logs
impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { url: url.into(), api_key: api_key.filter(|k| !k.is_empty()), client })
    }

    /// Endpoint from `AUTOLAB_LLM_URL`, bearer key from `AUTOLAB_LLM_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_URL).map_err(|_| LlmError::Config(format!("{ENV_URL} is not set")))?;
        Self::new(url, std::env::var(ENV_API_KEY).ok(), Duration::from_secs(120))
    }

    /// Model name from `AUTOLAB_LLM_MODEL`, or the default.
    pub fn model_from_env() -> String {
        std::env::var(ENV_MODEL).ok().filter(|m| !m.is_empty()).unwrap_or_else(|| DEFAULT_MODEL.to_string())
    }
}

fn snippet(body: &str) -> String {
    let mut s: String = body.chars().take(SNIPPET_CHARS).collect();
    if body.chars().count() > SNIPPET_CHARS {
        s.push_str("...");
    }
    s
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.to_json());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport { status: None, detail: e.to_string() })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| LlmError::Transport { status: Some(status.as_u16()), detail: e.to_string() })?;
        if !status.is_success() {
            return Err(LlmError::Transport { status: Some(status.as_u16()), detail: snippet(&body) });
        }
        let completion: Completion = serde_json::from_str(&body).map_err(|e| LlmError::Decode(e.to_string()))?;
        completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Decode("response has no choices[0].message.content".into()))
    }
}
