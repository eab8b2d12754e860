//! HTTP backend speaking the standard chat / completion wire formats.
//!
//! The request body is serialized exactly once per prompt, so every retry
//! sends byte-identical bytes. Retries cover transport errors, HTTP 429, and
//! 5xx, with exponential backoff; any other 4xx is a hard rejection. Log
//! events never include prompt or report text — only ids, sizes, statuses,
//! and timing.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use radlabel_core::prompt::{PromptBundle, PromptPayload, WireMode};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tracing::debug;

use crate::rate_limit::RateLimiter;
use crate::{Backend, BackendResponse, ClientError, EndpointConfig};

pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::Client,
    bearer_token: Option<String>,
    in_flight: Arc<Semaphore>,
    rate_limiter: Option<RateLimiter>,
}

impl HttpBackend {
    /// Validates the configuration and resolves the auth variable up front,
    /// so a missing credential fails before any request is attempted.
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let bearer_token = match &config.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| ClientError::AuthMissing {
                env_var: var.clone(),
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let in_flight = Arc::new(Semaphore::new(config.max_in_flight));
        let rate_limiter = config.requests_per_second.map(RateLimiter::new);
        Ok(HttpBackend {
            config,
            client,
            bearer_token,
            in_flight,
            rate_limiter,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn request_url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.wire_mode {
            WireMode::Chat => format!("{base}/chat/completions"),
            WireMode::Completion => format!("{base}/completions"),
        }
    }

    /// Builds the wire body for this prompt. Called once per prompt; the
    /// resulting bytes are reused verbatim across retries.
    fn request_body(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        let params = &self.config.params;
        let mut body = json!({
            "model": self.config.model_name,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
            "max_tokens": params.max_tokens,
        });
        match &bundle.payload {
            PromptPayload::Chat(messages) => {
                body["messages"] = serde_json::to_value(messages)
                    .map_err(|e| ClientError::Config(e.to_string()))?;
            }
            PromptPayload::Completion(prompt) => {
                body["prompt"] = Value::String(prompt.clone());
            }
        }
        serde_json::to_string(&body).map_err(|e| ClientError::Config(e.to_string()))
    }

    /// Pulls the generated text and finish reason out of a response body.
    fn parse_response(&self, body: &str) -> Result<(String, String), ClientError> {
        let value: Value = serde_json::from_str(body)
            .map_err(|e| ClientError::MalformedResponse(format!("not JSON: {e}")))?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| ClientError::MalformedResponse("no choices[0]".to_string()))?;
        let text = match self.config.wire_mode {
            WireMode::Chat => choice
                .get("message")
                .and_then(|m| m.get("content"))
                .and_then(Value::as_str),
            WireMode::Completion => choice.get("text").and_then(Value::as_str),
        }
        .ok_or_else(|| {
            ClientError::MalformedResponse("choices[0] lacks generated text".to_string())
        })?;
        let finish_reason = choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .unwrap_or("other")
            .to_string();
        Ok((text.to_string(), finish_reason))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn wire_mode(&self) -> WireMode {
        self.config.wire_mode
    }

    async fn generate(&self, bundle: &PromptBundle) -> Result<BackendResponse, ClientError> {
        let got = bundle.payload.wire_mode();
        if got != self.config.wire_mode {
            return Err(ClientError::ModeMismatch {
                expected: self.config.wire_mode,
                got,
            });
        }

        let body = self.request_body(bundle)?;
        let url = self.request_url();
        let _permit = self
            .in_flight
            .acquire()
            .await
            .expect("request semaphore never closes");

        let start = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut last_error = String::new();

        for attempt in 1..=max_attempts {
            if let Some(limiter) = &self.rate_limiter {
                limiter.acquire().await;
            }

            let mut request = self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .body(body.clone());
            if let Some(token) = &self.bearer_token {
                request = request.header("authorization", format!("Bearer {token}"));
            }

            match request.send().await {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().await.unwrap_or_default();
                    if status.is_success() {
                        let (raw_text, finish_reason) = self.parse_response(&text)?;
                        debug!(
                            report_id = %bundle.report_id,
                            attempt,
                            latency_ms = start.elapsed().as_millis() as u64,
                            "request succeeded"
                        );
                        return Ok(BackendResponse {
                            raw_text,
                            finish_reason,
                            latency_ms: start.elapsed().as_millis() as u64,
                            attempt_count: attempt,
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(ClientError::Rejected {
                            status: status.as_u16(),
                            body: text,
                        });
                    }
                    last_error = format!("status {}", status.as_u16());
                    debug!(report_id = %bundle.report_id, attempt, status = status.as_u16(), "retryable status");
                }
                Err(e) => {
                    // reqwest errors can embed the URL but never the body
                    last_error = format!("transport: {e}");
                    debug!(report_id = %bundle.report_id, attempt, "transport error");
                }
            }

            if attempt < max_attempts {
                let delay = self.config.backoff.delay_ms(attempt);
                tokio::time::sleep(Duration::from_millis(delay)).await;
            }
        }

        Err(ClientError::RetriesExhausted {
            attempts: max_attempts,
            last: last_error,
        })
    }
}
