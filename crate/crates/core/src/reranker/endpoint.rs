//! Chat-completions ranker with bounded retry and record/replay transports.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_prompt, parse_ranking, PromptConfig, Ranker, RerankError, RerankRequest, RerankResponse};

pub const ENDPOINT_URL_ENV: &str = "SOURCERANK_ENDPOINT_URL";
pub const API_KEY_ENV: &str = "SOURCERANK_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequestBody {
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request body serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Sends one chat request and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, body: &ChatRequestBody) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport {
            agent,
            url: url.into(),
            api_key: api_key.into(),
        }
    }

    /// Reads the endpoint URL and API key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, RerankError> {
        let url = std::env::var(ENDPOINT_URL_ENV)
            .map_err(|_| RerankError::NotConfigured(format!("{ENDPOINT_URL_ENV} is not set")))?;
        let key =
            std::env::var(API_KEY_ENV).map_err(|_| RerankError::NotConfigured(format!("{API_KEY_ENV} is not set")))?;
        Ok(HttpTransport::new(url, key, timeout))
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn complete(&self, body: &ChatRequestBody) -> Result<String, TransportError> {
        let result = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => {
                return Err(TransportError {
                    retryable: code == 429 || code >= 500,
                    message: format!("HTTP {code}"),
                })
            }
            Err(e) => {
                return Err(TransportError {
                    retryable: true,
                    message: e.to_string(),
                })
            }
        };
        let parsed: CompletionResponse = response.body_mut().read_json().map_err(|e| TransportError {
            retryable: false,
            message: format!("unexpected response body: {e}"),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError {
                retryable: false,
                message: "response has no choices".into(),
            })
    }
}

/// One request/response pair in a replay log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_digest: String,
    pub request: ChatRequestBody,
    pub response: String,
}

/// Forwards to an inner transport and appends every successful exchange to
/// a JSON-lines replay log.
pub struct RecordingTransport<T> {
    inner: T,
    log: Mutex<BufWriter<File>>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn create(inner: T, path: &Path) -> std::io::Result<Self> {
        Ok(RecordingTransport {
            inner,
            log: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn complete(&self, body: &ChatRequestBody) -> Result<String, TransportError> {
        let response = self.inner.complete(body)?;
        let record = ReplayRecord {
            request_digest: body.digest(),
            request: body.clone(),
            response: response.clone(),
        };
        let mut log = self.log.lock().expect("replay log poisoned");
        let written = serde_json::to_writer(&mut *log, &record)
            .map_err(std::io::Error::from)
            .and_then(|_| log.write_all(b"\n"))
            .and_then(|_| log.flush());
        written.map_err(|e| TransportError {
            retryable: false,
            message: format!("cannot write replay log: {e}"),
        })?;
        Ok(response)
    }
}

/// Answers from a replay log, keyed by request digest. Unknown requests fail
/// without retry.
#[derive(Clone, Debug, Default)]
pub struct ReplayTransport {
    responses: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayTransport {
            responses: records.into_iter().map(|r| (r.request_digest, r.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(std::io::Error::from)?);
        }
        Ok(ReplayTransport::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, body: &ChatRequestBody) -> Result<String, TransportError> {
        self.responses.get(&body.digest()).cloned().ok_or_else(|| TransportError {
            retryable: false,
            message: "no recorded response for request".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    pub model: String,
    pub temperature: f64,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    pub prompt: PromptConfig,
}

impl Default for ChatConfig {
    fn default() -> Self {
        ChatConfig {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_attempts: 3,
            initial_backoff_ms: 500,
            timeout_secs: 60,
            prompt: PromptConfig::default(),
        }
    }
}

pub struct ChatRanker {
    transport: Box<dyn ChatTransport>,
    config: ChatConfig,
}

impl std::fmt::Debug for ChatRanker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatRanker").field("config", &self.config).finish_non_exhaustive()
    }
}

impl ChatRanker {
    pub fn new(transport: Box<dyn ChatTransport>, config: ChatConfig) -> Self {
        ChatRanker { transport, config }
    }

    pub fn request_body(&self, request: &RerankRequest) -> Result<ChatRequestBody, RerankError> {
        Ok(ChatRequestBody {
            model: self.config.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: build_prompt(request, &self.config.prompt)?,
            }],
            temperature: self.config.temperature,
        })
    }
}

impl Ranker for ChatRanker {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        let body = self.request_body(request)?;
        let mut attempts = Vec::new();
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        for attempt in 1..=self.config.max_attempts.max(1) {
            match self.transport.complete(&body) {
                Ok(raw) => return Ok(parse_ranking(&raw, request)),
                Err(e) => {
                    attempts.push(format!("attempt {attempt}: {e}"));
                    if !e.retryable || attempt == self.config.max_attempts {
                        break;
                    }
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Err(RerankError::Endpoint { attempts })
    }
}
