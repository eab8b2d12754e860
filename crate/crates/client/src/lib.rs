//! Inference backends for label generation.
//!
//! A [`Backend`] turns a rendered prompt bundle into raw model text. The HTTP
//! implementation speaks the two standard completion wire formats with
//! bounded concurrency, optional rate limiting, and exponential-backoff
//! retries; the mock implementation replays scripted responses for
//! deterministic offline runs. Credentials are only ever named by environment
//! variable — configuration files and manifests never hold a token value.

pub mod http;
pub mod rate_limit;

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use radlabel_core::prompt::{PromptBundle, WireMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;

/// Sampling controls sent with every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: 0.95,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Exponential backoff between retry attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackoffConfig {
    pub initial_ms: u64,
    pub multiplier: f64,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            initial_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl BackoffConfig {
    /// Delay before retry number `retry` (1-based).
    pub fn delay_ms(&self, retry: u32) -> u64 {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        (self.initial_ms as f64 * factor).round() as u64
    }
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_in_flight() -> usize {
    4
}

/// Where and how to reach an inference endpoint. `auth_env_var` names the
/// environment variable holding the bearer token; the value itself is read at
/// backend construction and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub wire_mode: WireMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub backoff: BackoffConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub params: GenerationParams,
}

impl EndpointConfig {
    pub fn from_json(text: &str) -> Result<Self, ClientError> {
        let config: EndpointConfig =
            serde_json::from_str(text).map_err(|e| ClientError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let parsed = url::Url::parse(&self.base_url)
            .map_err(|e| ClientError::Config(format!("base_url: {e}")))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(ClientError::Config(format!(
                "base_url must be http(s), got {}",
                parsed.scheme()
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(ClientError::Config("model_name must be non-empty".into()));
        }
        if self.timeout_secs == 0 {
            return Err(ClientError::Config("timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::Config("max_in_flight must be positive".into()));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps > 0.0) {
                return Err(ClientError::Config(
                    "requests_per_second must be positive".into(),
                ));
            }
        }
        if self.backoff.initial_ms == 0 || self.backoff.multiplier < 1.0 {
            return Err(ClientError::Config(
                "backoff needs initial_ms >= 1 and multiplier >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Raw model output plus transport bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub raw_text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("auth environment variable {env_var} is not set")]
    AuthMissing { env_var: String },
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("prompt was rendered for {got} but the endpoint speaks {expected}")]
    ModeMismatch { expected: WireMode, got: WireMode },
    #[error("endpoint rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("endpoint returned an unusable response body: {0}")]
    MalformedResponse(String),
}

/// Anything that can answer a rendered prompt.
#[async_trait]
pub trait Backend: Send + Sync {
    /// The wire format this backend expects prompts to be rendered for.
    fn wire_mode(&self) -> WireMode;

    async fn generate(&self, bundle: &PromptBundle) -> Result<BackendResponse, ClientError>;
}

/// Deterministic scripted backend: replies by report id, or with a fixed
/// default for unscripted ids. Accepts either wire format.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: BTreeMap<String, String>,
    default_response: String,
    wire_mode: WireMode,
}

/// On-disk mock script: per-report responses and an optional default.
#[derive(Debug, Deserialize)]
struct MockScriptFile {
    #[serde(default)]
    responses: BTreeMap<String, String>,
    #[serde(default)]
    default: Option<String>,
}

impl MockBackend {
    pub fn new(script: BTreeMap<String, String>) -> Self {
        MockBackend {
            script,
            default_response: "{}".to_string(),
            wire_mode: WireMode::Chat,
        }
    }

    pub fn with_default_response(mut self, response: impl Into<String>) -> Self {
        self.default_response = response.into();
        self
    }

    pub fn with_wire_mode(mut self, wire_mode: WireMode) -> Self {
        self.wire_mode = wire_mode;
        self
    }

    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        let file: MockScriptFile =
            serde_json::from_str(&text).map_err(|e| ClientError::Config(e.to_string()))?;
        let mut mock = MockBackend::new(file.responses);
        if let Some(default) = file.default {
            mock.default_response = default;
        }
        Ok(mock)
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn wire_mode(&self) -> WireMode {
        self.wire_mode
    }

    async fn generate(&self, bundle: &PromptBundle) -> Result<BackendResponse, ClientError> {
        let raw_text = self
            .script
            .get(&bundle.report_id)
            .cloned()
            .unwrap_or_else(|| self.default_response.clone());
        Ok(BackendResponse {
            raw_text,
            finish_reason: "stop".to_string(),
            latency_ms: 0,
            attempt_count: 1,
        })
    }
}
