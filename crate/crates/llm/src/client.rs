//! Chat-completion client with retries, a deterministic stub and bounded
//! concurrency.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{PromptBundle, PromptError};

const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("endpoint returned HTTP {status}: {excerpt}")]
    Api { status: u16, excerpt: String },
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed completion response: {0}")]
    Response(String),
    #[error("could not parse a definition from the model output: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; read per request.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub temperature: f64,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff_ms: u64,
    pub max_concurrency: usize,
    /// Answer from a canned, input-hashed response instead of the network.
    pub stub: bool,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "meta-llama/Llama-3.1-8B-Instruct".into(),
            token_env: "ERRDISC_API_TOKEN".into(),
            timeout_secs: 60,
            max_retries: 3,
            temperature: 0.0,
            backoff_ms: 500,
            max_concurrency: 4,
            stub: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Sends one JSON POST. `Err` means no HTTP response arrived.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpResponse, String>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpResponse, String> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

pub struct ChatClient {
    config: ChatClientConfig,
    transport: Box<dyn Transport>,
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    messages: Vec<crate::prompt::Message>,
    temperature: f64,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_CHARS).collect()
}

/// Canned response keyed by a hash of the rendered prompt.
pub fn stub_response(bundle: &PromptBundle) -> String {
    let digest = Sha256::digest(bundle.render().as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("Name: Stub error {}\nDefinition: Canned response for prompt {hex}.", &hex[..6])
}

impl ChatClient {
    pub fn new(config: ChatClientConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: ChatClientConfig, transport: Box<dyn Transport>) -> Self {
        Self { config, transport }
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    pub fn generate(&self, bundle: &PromptBundle) -> Result<String, LlmError> {
        if self.config.stub {
            return Ok(stub_response(bundle));
        }
        let body = serde_json::to_string(&Request {
            model: &self.config.model,
            messages: bundle.messages(),
            temperature: self.config.temperature,
        })
        .map_err(|e| LlmError::Response(e.to_string()))?;
        let mut headers = Vec::new();
        match std::env::var(&self.config.token_env) {
            Ok(token) if !token.is_empty() => headers.push(("Authorization".to_string(), format!("Bearer {token}"))),
            _ => log::debug!("{} is unset; sending the request without a bearer token", self.config.token_env),
        }
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.post_json(&self.config.endpoint, &headers, &body, timeout) {
                Ok(resp) if (200..300).contains(&resp.status) => return parse_completion(&resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::warn!("attempt {}/{attempts}: HTTP {}", attempt + 1, resp.status);
                    if attempt + 1 == attempts {
                        return Err(LlmError::Api { status: resp.status, excerpt: excerpt(&resp.body) });
                    }
                }
                Ok(resp) => return Err(LlmError::Api { status: resp.status, excerpt: excerpt(&resp.body) }),
                Err(e) => {
                    log::warn!("attempt {}/{attempts}: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(LlmError::Transport { attempts, message: last })
    }

    /// Runs [`ChatClient::generate`] over all bundles with at most
    /// `max_concurrency` requests in flight; results keep input order.
    pub fn generate_all(&self, bundles: &[PromptBundle]) -> Vec<Result<String, LlmError>> {
        let workers = self.config.max_concurrency.clamp(1, bundles.len().max(1));
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<String, LlmError>>>> = Mutex::new(vec![None; bundles.len()]);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= bundles.len() {
                        break;
                    }
                    let r = self.generate(&bundles[i]);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every bundle ran")).collect()
    }
}

fn parse_completion(body: &str) -> Result<String, LlmError> {
    let c: Completion = serde_json::from_str(body).map_err(|e| LlmError::Response(format!("{e}: {}", excerpt(body))))?;
    c.choices
        .into_iter()
        .next()
        .map(|ch| ch.message.content)
        .ok_or_else(|| LlmError::Response("no choices in response".into()))
}
