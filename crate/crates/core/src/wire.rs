//! The LM wire protocol and the remote clients that speak it.
//!
//! One JSON endpoint serves every model call. A request names its type
//! (`generate`, `score`, `embed` or `chat`); the response carries whichever of
//! `text`, `token_logprobs` and `embedding` the type calls for.
//!
//! ```json
//! {"version":1,"type":"score","prompt":"...","max_tokens":8,"temperature":0.0,"want_logprobs":true}
//! {"text":"...","token_logprobs":[-0.1,-0.4],"embedding":null}
//! ```

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::EmbedderClient;
use crate::pipeline::{approx_token_count, GenerationConfig, GeneratorClient};
use crate::query::ProbeClient;
use crate::rerank::{parse_picker_reply, PickerClient, PickerPrompt};

pub const PROTOCOL_VERSION: u32 = 1;
pub const ENDPOINT_ENV: &str = "CODERAG_LM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    /// Transport failure or the service refused the call.
    #[error("model service unavailable: {0}")]
    Unavailable(String),
    /// The service answered, but not with something usable.
    #[error("invalid reply: {0}")]
    InvalidReply(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestType {
    Generate,
    Score,
    Embed,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub version: u32,
    #[serde(rename = "type")]
    pub kind: RequestType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub want_logprobs: bool,
}

impl WireRequest {
    fn new(kind: RequestType) -> Self {
        WireRequest {
            version: PROTOCOL_VERSION,
            kind,
            prompt: None,
            text: None,
            max_tokens: None,
            temperature: None,
            want_logprobs: false,
        }
    }

    pub fn generate(prompt: &str, config: &GenerationConfig) -> Self {
        WireRequest {
            prompt: Some(prompt.to_string()),
            max_tokens: Some(config.max_new_tokens),
            temperature: Some(config.temperature),
            ..Self::new(RequestType::Generate)
        }
    }

    pub fn score(prompt: &str, steps: usize) -> Self {
        WireRequest {
            prompt: Some(prompt.to_string()),
            max_tokens: Some(steps),
            temperature: Some(0.0),
            want_logprobs: true,
            ..Self::new(RequestType::Score)
        }
    }

    pub fn embed(text: &str) -> Self {
        WireRequest { text: Some(text.to_string()), ..Self::new(RequestType::Embed) }
    }

    pub fn chat(prompt: &str) -> Self {
        WireRequest {
            prompt: Some(prompt.to_string()),
            temperature: Some(0.0),
            ..Self::new(RequestType::Chat)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
}

impl WireResponse {
    /// Decodes an untrusted response body.
    pub fn from_json(body: &str) -> Result<Self, ClientError> {
        let resp: WireResponse =
            serde_json::from_str(body).map_err(|e| ClientError::InvalidReply(e.to_string()))?;
        if let Some(v) = resp.version {
            if v > PROTOCOL_VERSION {
                return Err(ClientError::InvalidReply(format!("unsupported protocol version {v}")));
            }
        }
        Ok(resp)
    }

    fn into_text(self) -> Result<String, ClientError> {
        self.text.ok_or_else(|| ClientError::InvalidReply("response has no text".into()))
    }
}

/// Moves one request to the service and back.
pub trait Transport: Send + Sync {
    fn call(&self, request: &WireRequest) -> Result<WireResponse, ClientError>;
}

/// JSON over HTTP POST.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, Duration::from_secs(120))
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        HttpTransport {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &WireRequest) -> Result<WireResponse, ClientError> {
        let body = serde_json::to_string(request).expect("requests serialize");
        let resp = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| ClientError::Unavailable(e.to_string()))?;
        let text = resp
            .into_string()
            .map_err(|e| ClientError::Unavailable(e.to_string()))?;
        WireResponse::from_json(&text)
    }
}

pub struct RemoteProbe {
    transport: Arc<dyn Transport>,
}

impl RemoteProbe {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        RemoteProbe { transport }
    }
}

impl ProbeClient for RemoteProbe {
    fn greedy_score(&self, prompt: &str, m: usize) -> Result<f64, ClientError> {
        let resp = self.transport.call(&WireRequest::score(prompt, m))?;
        let logprobs = resp
            .token_logprobs
            .ok_or_else(|| ClientError::InvalidReply("score response has no token_logprobs".into()))?;
        if logprobs.len() > m {
            return Err(ClientError::InvalidReply(format!(
                "{} logprobs for {m} steps",
                logprobs.len()
            )));
        }
        Ok(logprobs.iter().sum())
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub struct RemoteEmbedder {
    transport: Arc<dyn Transport>,
    dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    /// With `dim` unset, the dimension is learned from the first call.
    pub fn new(transport: Arc<dyn Transport>, dim: Option<usize>) -> Self {
        let cell = OnceLock::new();
        if let Some(d) = dim {
            let _ = cell.set(d);
        }
        RemoteEmbedder { transport, dim: cell }
    }

    fn raw_embed(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        let resp = self.transport.call(&WireRequest::embed(text))?;
        let v = resp
            .embedding
            .ok_or_else(|| ClientError::InvalidReply("embed response has no embedding".into()))?;
        if v.is_empty() {
            return Err(ClientError::InvalidReply("empty embedding".into()));
        }
        Ok(v)
    }
}

impl EmbedderClient for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        let v = self.raw_embed(text)?;
        let dim = *self.dim.get_or_init(|| v.len());
        if v.len() != dim {
            return Err(ClientError::InvalidReply(format!(
                "embedding has dimension {}, expected {dim}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn dimension(&self) -> Result<usize, ClientError> {
        if let Some(d) = self.dim.get() {
            return Ok(*d);
        }
        let v = self.raw_embed("")?;
        Ok(*self.dim.get_or_init(|| v.len()))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub struct RemotePicker {
    transport: Arc<dyn Transport>,
    prompt: PickerPrompt,
}

impl RemotePicker {
    pub fn new(transport: Arc<dyn Transport>, prompt: PickerPrompt) -> Self {
        RemotePicker { transport, prompt }
    }
}

impl PickerClient for RemotePicker {
    fn pick(&self, query: &str, window: &[&str]) -> Result<usize, ClientError> {
        let prompt = self.prompt.render(query, window);
        let reply = self.transport.call(&WireRequest::chat(&prompt))?.into_text()?;
        parse_picker_reply(&reply, window.len())
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub struct RemoteGenerator {
    transport: Arc<dyn Transport>,
}

impl RemoteGenerator {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        RemoteGenerator { transport }
    }
}

impl GeneratorClient for RemoteGenerator {
    fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<String, ClientError> {
        self.transport.call(&WireRequest::generate(prompt, config))?.into_text()
    }

    /// The protocol exposes no tokenizer, so this is the approximate count.
    fn count_tokens(&self, text: &str) -> usize {
        approx_token_count(text)
    }
}
