use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{ChatModel, ChatRequest, GatewayError};
use super::mock::FRAME_CAPTION_PREFIX;

/// Connection settings for an OpenAI-compatible chat-completion server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpoint {
    /// Base URL up to, not including, `/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles on every further attempt.
    pub backoff_base_ms: u64,
    /// Precede each video frame with a `Frame i at t s` text part.
    pub caption_frames: bool,
    pub max_tokens: Option<u32>,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            auth_env: None,
            timeout_ms: 120_000,
            max_retries: 3,
            max_in_flight: 8,
            backoff_base_ms: 500,
            caption_frames: true,
            max_tokens: None,
        }
    }
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidEndpoint("timeout must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidEndpoint("max_in_flight must be >= 1".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(GatewayError::InvalidEndpoint(format!("unsupported URL {}", self.base_url)));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub struct HttpChatModel {
    endpoint: ModelEndpoint,
    client: reqwest::Client,
    token: Option<String>,
    permits: Semaphore,
    retry_events: AtomicU64,
}

impl HttpChatModel {
    /// Builds the client, resolving the auth token from the environment.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let token = match &endpoint.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::InvalidEndpoint(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidEndpoint(e.to_string()))?;
        Ok(Self {
            permits: Semaphore::new(endpoint.max_in_flight),
            endpoint,
            client,
            token,
            retry_events: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Number of retries issued so far across all requests.
    pub fn retry_events(&self) -> u64 {
        self.retry_events.load(Ordering::Relaxed)
    }

    /// Wire body for one request: a single user message holding the prompt
    /// followed by the images as base64 data URLs.
    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        for (i, img) in req.images.iter().enumerate() {
            let caption = match (img.timestamp, &img.caption) {
                (Some(t), _) if self.endpoint.caption_frames => {
                    Some(format!("{FRAME_CAPTION_PREFIX}{} at {t:.3}s", i + 1))
                }
                (_, Some(c)) => Some(c.clone()),
                _ => None,
            };
            if let Some(text) = caption {
                content.push(json!({"type": "text", "text": text}));
            }
            let url = format!("data:{};base64,{}", img.mime, BASE64.encode(&img.bytes));
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0.0,
        });
        if let Some(max) = self.endpoint.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt - 1).min(16);
        Duration::from_millis(self.endpoint.backoff_base_ms.saturating_mul(factor))
    }
}

fn message_text(body: &Value) -> Result<String, GatewayError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GatewayError::InvalidResponse("no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(GatewayError::InvalidResponse(format!("unexpected content {other}"))),
    }
}

#[async_trait]
impl ChatModel for HttpChatModel {
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = serde_json::to_vec(&self.request_body(req)).expect("request body serializes");
        let url = self.endpoint.completions_url();
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let attempts = self.endpoint.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.retry_events.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(attempt, error = %last, "retrying chat request");
                tokio::time::sleep(self.backoff(attempt)).await;
            }
            let mut builder = self
                .client
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(token) = &self.token {
                builder = builder.bearer_auth(token);
            }
            let resp = match builder.send().await {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text().await {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status.is_success() {
                let value: Value =
                    serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
                return message_text(&value);
            }
            if status.is_server_error() || status.as_u16() == 429 {
                last = format!("HTTP {status}: {text}");
                continue;
            }
            return Err(GatewayError::BadRequest {
                status: status.as_u16(),
                body: text,
            });
        }
        Err(GatewayError::ModelUnavailable { attempts, last })
    }
}
