//! Model and media I/O: the chat-completion client, the scripted mock,
//! frame extraction and media probing.

mod http;
mod media;
mod mock;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use http::{HttpChatModel, ModelEndpoint};
pub use media::{
    check_timestamps, parse_probe_output, CommandDecoder, CommandProber, FrameSource, InlineProber, MediaProber,
    SyntheticFrames, FFMPEG_FRAME_TEMPLATE, FFMPEG_IMAGE_TEMPLATE, FFPROBE_TEMPLATE, SYNTHETIC_MIME,
};
pub use mock::{
    mock_router, parse_chat_body, serve_mock, Matcher, MockModel, MockRule, MockScript, Pattern, FRAME_CAPTION_PREFIX,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("model unavailable after {attempts} attempt(s): {last}")]
    ModelUnavailable { attempts: u32, last: String },
    #[error("request rejected with HTTP {status}: {body}")]
    BadRequest { status: u16, body: String },
    #[error("malformed model response: {0}")]
    InvalidResponse(String),
    #[error("frame decode failed{}: {diagnostics}", .timestamp.map(|t| format!(" at {t}s")).unwrap_or_default())]
    DecodeFailed { timestamp: Option<f64>, diagnostics: String },
    #[error("media probe failed for {path}: {reason}")]
    MediaProbeFailed { path: String, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid endpoint configuration: {0}")]
    InvalidEndpoint(String),
}

/// One image attached to a chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub mime: String,
    pub bytes: Vec<u8>,
    /// Source timestamp in seconds for video frames.
    pub timestamp: Option<f64>,
    /// Text shown before the image when it is not a timestamped frame.
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub images: Vec<EncodedImage>,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            images: Vec::new(),
        }
    }
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    /// Returns the assistant message text for one single-turn request.
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

#[async_trait]
impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(req).await
    }
}

#[async_trait]
impl<T: ChatModel + ?Sized> ChatModel for &T {
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(req).await
    }
}

/// Caps the number of outstanding requests to the wrapped model.
pub struct Limited<M> {
    inner: M,
    permits: Semaphore,
}

impl<M: ChatModel> Limited<M> {
    pub fn new(inner: M, max_in_flight: usize) -> Self {
        Self {
            inner,
            permits: Semaphore::new(max_in_flight.max(1)),
        }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

#[async_trait]
impl<M: ChatModel> ChatModel for Limited<M> {
    async fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.complete(req).await
    }
}
