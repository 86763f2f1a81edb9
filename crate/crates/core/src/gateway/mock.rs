use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::{ChatModel, ChatRequest, EncodedImage, GatewayError};

/// Leading text of the caption part sent before each video frame.
pub const FRAME_CAPTION_PREFIX: &str = "Frame ";

static CAPTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Frame \d+ at (-?[0-9.]+)s$").unwrap());

/// A compiled regular expression that (de)serializes as its source text.
#[derive(Debug, Clone)]
pub struct Pattern(pub Regex);

impl Pattern {
    pub fn new(src: &str) -> Result<Self, regex::Error> {
        Regex::new(src).map(Pattern)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.0.as_str() == other.0.as_str()
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.0.as_str())
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let src = String::deserialize(d)?;
        Pattern::new(&src).map_err(serde::de::Error::custom)
    }
}

/// Predicate over a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Prompt contains the substring.
    Contains(String),
    /// Prompt matches the regex.
    Regex(Pattern),
    /// At least `min_fraction` of the timestamped images fall inside
    /// `[start, end]`.
    FramesInside { start: f64, end: f64, min_fraction: f64 },
    ImageCount(usize),
    All(Vec<Matcher>),
    Any(Vec<Matcher>),
    Not(Box<Matcher>),
}

impl Matcher {
    pub fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            Matcher::Contains(s) => req.prompt.contains(s.as_str()),
            Matcher::Regex(p) => p.0.is_match(&req.prompt),
            Matcher::FramesInside {
                start,
                end,
                min_fraction,
            } => {
                let stamps: Vec<f64> = req.images.iter().filter_map(|i| i.timestamp).collect();
                if stamps.is_empty() {
                    return false;
                }
                let inside = stamps.iter().filter(|&&t| t >= *start && t <= *end).count();
                inside as f64 >= min_fraction * stamps.len() as f64
            }
            Matcher::ImageCount(n) => req.images.len() == *n,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(req)),
            Matcher::Any(ms) => ms.iter().any(|m| m.matches(req)),
            Matcher::Not(m) => !m.matches(req),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: Matcher,
    pub reply: String,
}

/// Ordered rules; the first matching rule's reply wins.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: String,
}

impl MockScript {
    pub fn constant(reply: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: reply.into(),
        }
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = reply.into();
        self
    }

    pub fn rule(mut self, when: Matcher, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            when,
            reply: reply.into(),
        });
        self
    }

    pub fn on_contains(self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rule(Matcher::Contains(needle.into()), reply)
    }

    pub fn respond(&self, req: &ChatRequest) -> &str {
        self.rules
            .iter()
            .find(|r| r.when.matches(req))
            .map_or(self.default.as_str(), |r| r.reply.as_str())
    }
}

/// Deterministic in-process model driven by a [`MockScript`].
pub struct MockModel {
    script: MockScript,
    latency: Option<Duration>,
    yields: usize,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    log: Option<Mutex<Vec<ChatRequest>>>,
}

impl MockModel {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            latency: None,
            yields: 0,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            log: None,
        }
    }

    /// Sleeps this long inside every call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Yields to the scheduler `n` times inside every call so concurrent
    /// callers interleave.
    pub fn with_yields(mut self, n: usize) -> Self {
        self.yields = n;
        self
    }

    /// Keeps a copy of every request.
    pub fn recording(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneously outstanding calls observed.
    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.as_ref().map(|l| l.lock().unwrap().clone()).unwrap_or_default()
    }
}

#[async_trait]
impl ChatModel for MockModel {
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        if let Some(log) = &self.log {
            log.lock().unwrap().push(req.clone());
        }
        for _ in 0..self.yields {
            tokio::task::yield_now().await;
        }
        if let Some(d) = self.latency {
            tokio::time::sleep(d).await;
        }
        let reply = self.script.respond(req).to_string();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(reply)
    }
}

fn decode_data_url(url: &str) -> Result<(String, Vec<u8>), String> {
    let rest = url.strip_prefix("data:").ok_or("image url is not a data URL")?;
    let (mime, data) = rest.split_once(";base64,").ok_or("data URL is not base64")?;
    let bytes = BASE64.decode(data).map_err(|e| e.to_string())?;
    Ok((mime.to_string(), bytes))
}

/// Rebuilds a [`ChatRequest`] from an OpenAI-style chat body. Frame
/// timestamps are recovered from the caption text parts.
pub fn parse_chat_body(body: &Value) -> Result<ChatRequest, String> {
    let messages = body.get("messages").and_then(Value::as_array).ok_or("missing messages")?;
    let msg = messages
        .iter()
        .rev()
        .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
        .ok_or("no user message")?;
    let mut req = ChatRequest::default();
    match msg.get("content") {
        Some(Value::String(s)) => req.prompt = s.clone(),
        Some(Value::Array(parts)) => {
            let mut pending_text: Option<String> = None;
            let mut prompt_seen = false;
            for part in parts {
                match part.get("type").and_then(Value::as_str) {
                    Some("text") => {
                        let text = part.get("text").and_then(Value::as_str).unwrap_or_default();
                        if !prompt_seen {
                            req.prompt = text.to_string();
                            prompt_seen = true;
                        } else {
                            pending_text = Some(text.to_string());
                        }
                    }
                    Some("image_url") => {
                        let url = part.pointer("/image_url/url").and_then(Value::as_str).ok_or("image part without url")?;
                        let (mime, bytes) = decode_data_url(url)?;
                        let caption = pending_text.take();
                        let timestamp = caption
                            .as_deref()
                            .and_then(|c| CAPTION_RE.captures(c))
                            .and_then(|c| c[1].parse().ok());
                        req.images.push(EncodedImage {
                            mime,
                            bytes,
                            timestamp,
                            caption: if timestamp.is_some() { None } else { caption },
                        });
                    }
                    other => return Err(format!("unsupported content part {other:?}")),
                }
            }
        }
        _ => return Err("message content missing".into()),
    }
    Ok(req)
}

async fn chat_handler(State(model): State<Arc<MockModel>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let req = match parse_chat_body(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": {"message": e}}))),
    };
    let text = model.complete(&req).await.unwrap_or_default();
    let reply = json!({
        "id": format!("mock-{}", model.calls()),
        "object": "chat.completion",
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop",
        }],
    });
    (StatusCode::OK, Json(reply))
}

/// Routes `/v1/chat/completions` and `/chat/completions` to the mock.
pub fn mock_router(model: Arc<MockModel>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_handler))
        .route("/chat/completions", post(chat_handler))
        .with_state(model)
}

/// Serves the mock over HTTP on `addr` (port 0 picks a free port).
pub async fn serve_mock(model: Arc<MockModel>, addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let app = mock_router(model);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "mock server stopped");
        }
    });
    Ok((bound, handle))
}
