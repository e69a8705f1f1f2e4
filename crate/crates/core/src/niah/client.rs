use super::grid::CellKey;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::HashMap;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no recorded response for {0}")]
    MissingFixture(String),
    #[error("recorded failure: {0}")]
    Recorded(String),
    #[error("invalid adapter config: {0}")]
    BadAdapter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub cell: CellKey,
}

/// A text-completion backend. Called from several worker threads at once.
pub trait CompletionClient: Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError>;
}

impl<F> CompletionClient for F
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, ClientError> + Sync,
{
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError> {
        self(request)
    }
}

fn first_digit_run(text: &str) -> Option<&str> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let rest = &text[start..];
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    Some(&rest[..end])
}

/// Answers with the needle payload found in the prompt. Generated prompts
/// contain no other digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoNeedleClient;

impl CompletionClient for EchoNeedleClient {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError> {
        Ok(match first_digit_run(request.prompt) {
            Some(payload) => format!("The special magic number is {payload}."),
            None => String::new(),
        })
    }
}

/// Like [`EchoNeedleClient`] but drops the last digit of the payload.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruncatingClient;

impl CompletionClient for TruncatingClient {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError> {
        Ok(match first_digit_run(request.prompt) {
            Some(payload) => format!("The special magic number is {}.", &payload[..payload.len() - 1]),
            None => String::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureEntry {
    length: usize,
    depth: f64,
    trial: usize,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureFile {
    responses: Vec<FixtureEntry>,
}

/// Replays recorded responses keyed by `(length, depth, trial)`.
///
/// File format: `{"responses": [{"length": 1000, "depth": 50, "trial": 0,
/// "text": "..."}]}`; an entry may carry `"error"` instead of `"text"`.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    responses: HashMap<(usize, u64, usize), Result<String, String>>,
}

impl FixtureClient {
    pub fn from_json(text: &str) -> Result<Self, ClientError> {
        let file: FixtureFile =
            serde_json::from_str(text).map_err(|e| ClientError::Malformed(format!("fixture: {e}")))?;
        let mut responses = HashMap::new();
        for e in file.responses {
            let value = match (e.text, e.error) {
                (Some(t), None) => Ok(t),
                (None, Some(err)) => Err(err),
                _ => {
                    return Err(ClientError::Malformed(
                        "fixture entry needs exactly one of text or error".into(),
                    ))
                }
            };
            responses.insert((e.length, e.depth.to_bits(), e.trial), value);
        }
        Ok(Self { responses })
    }
}

impl CompletionClient for FixtureClient {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError> {
        let c = request.cell;
        match self.responses.get(&(c.length, c.depth.to_bits(), c.trial)) {
            Some(Ok(text)) => Ok(text.clone()),
            Some(Err(err)) => Err(ClientError::Recorded(err.clone())),
            None => Err(ClientError::MissingFixture(format!(
                "length {} depth {} trial {}",
                c.length, c.depth, c.trial
            ))),
        }
    }
}

/// Maps the native request/response shape onto other completion APIs.
///
/// The native protocol is `{"prompt", "max_tokens", "temperature": 0}` in and
/// `{"text"}` out. An OpenAI-style completions endpoint would use
/// `"response_pointer": "/choices/0/text"` and put the model name in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointAdapter {
    pub prompt_field: String,
    pub max_tokens_field: String,
    pub temperature_field: Option<String>,
    /// JSON pointer to the completion text in the response.
    pub response_pointer: String,
    pub extra: Map<String, Value>,
    pub headers: Vec<(String, String)>,
}

impl Default for EndpointAdapter {
    fn default() -> Self {
        Self {
            prompt_field: "prompt".into(),
            max_tokens_field: "max_tokens".into(),
            temperature_field: Some("temperature".into()),
            response_pointer: "/text".into(),
            extra: Map::new(),
            headers: Vec::new(),
        }
    }
}

impl EndpointAdapter {
    pub fn from_json(text: &str) -> Result<Self, ClientError> {
        let adapter: Self = serde_json::from_str(text).map_err(|e| ClientError::BadAdapter(e.to_string()))?;
        if !adapter.response_pointer.is_empty() && !adapter.response_pointer.starts_with('/') {
            return Err(ClientError::BadAdapter(format!(
                "response_pointer must start with '/': {:?}",
                adapter.response_pointer
            )));
        }
        Ok(adapter)
    }

    pub fn request_body(&self, prompt: &str, max_tokens: u32) -> Value {
        let mut body = self.extra.clone();
        body.insert(self.prompt_field.clone(), Value::from(prompt));
        body.insert(self.max_tokens_field.clone(), Value::from(max_tokens));
        if let Some(t) = &self.temperature_field {
            body.insert(t.clone(), Value::from(0));
        }
        Value::Object(body)
    }

    pub fn extract_text(&self, response: &Value) -> Result<String, ClientError> {
        match response.pointer(&self.response_pointer) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(ClientError::Malformed(format!(
                "{} is not a string: {other}",
                self.response_pointer
            ))),
            None => Err(ClientError::Malformed(format!(
                "missing {}",
                self.response_pointer
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base, 2 x base, 4 x base...
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

/// Blocking JSON-over-HTTP completion client.
pub struct HttpClient {
    url: String,
    adapter: EndpointAdapter,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(String),
    Fail(ClientError),
}

impl HttpClient {
    pub fn new(
        url: impl Into<String>,
        adapter: EndpointAdapter,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            adapter,
            retry,
            agent,
        }
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.url);
        for (k, v) in &self.adapter.headers {
            req = req.header(k, v);
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fail(ClientError::Malformed(format!("HTTP {status}"))));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fail(ClientError::Malformed(format!("invalid JSON: {e}"))))?;
        self.adapter.extract_text(&value).map_err(Attempt::Fail)
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ClientError> {
        let body = self.adapter.request_body(request.prompt, request.max_tokens);
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(ClientError::Unreachable {
            attempts,
            message: last,
        })
    }
}
