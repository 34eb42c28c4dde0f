//! Access to an image-capable chat-completion endpoint and a text-embedding
//! endpoint, behind one trait so the pipeline can run against a live server or
//! a scripted fixture file.

mod http;
mod mock;

use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Step;

pub use http::{EndpointConfig, HttpClient};
pub use mock::{ScriptedMock, MOCK_EMBED_PREFIX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("cannot decode endpoint response: {0}")]
    Decode(String),
    #[error("no fixture for `{key}`")]
    MockMiss { key: String },
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize, index: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ClientError {
    /// Malformed or missing response content, as opposed to a failed exchange.
    pub fn is_decode_class(&self) -> bool {
        matches!(self, ClientError::Decode(_) | ClientError::MockMiss { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Arc<Vec<u8>>,
    pub media_type: String,
}

impl ImagePayload {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        ImagePayload {
            bytes: Arc::new(bytes),
            media_type: media_type.into(),
        }
    }

    /// Guesses the media type from a file extension.
    pub fn media_type_for(path: &Path) -> &'static str {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            Some("bmp") => "image/bmp",
            _ => "image/jpeg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

/// Identifies a request within a run. Not sent over the wire; the scripted
/// mock keys its fixtures on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestTag {
    pub sample_id: String,
    pub step: Step,
    pub attempt: u32,
}

impl RequestTag {
    pub fn fixture_key(&self) -> String {
        format!("{}/{}/{}", self.sample_id, self.step, self.attempt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    image: ImagePayload,
    messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
    pub tag: RequestTag,
}

impl ChatRequest {
    /// A single-turn user request carrying one image.
    pub fn user(image: ImagePayload, prompt: impl Into<String>, tag: RequestTag) -> Self {
        ChatRequest {
            image,
            messages: vec![Message {
                role: Role::User,
                text: prompt.into(),
            }],
            temperature: 0.0,
            max_tokens: 512,
            model_name: String::new(),
            tag,
        }
    }

    pub fn with_messages(image: ImagePayload, messages: Vec<Message>, tag: RequestTag) -> Result<Self, ClientError> {
        if messages.is_empty() {
            return Err(ClientError::InvalidRequest("a request needs at least one message".into()));
        }
        let mut req = Self::user(image, String::new(), tag);
        req.messages = messages;
        Ok(req)
    }

    pub fn image(&self) -> &ImagePayload {
        &self.image
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ClientError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(EmbeddingVector(values))
        } else {
            Err(ClientError::Decode("embedding contains a non-finite value".into()))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rejects ragged embedding batches.
pub fn check_dimensions(vectors: &[EmbeddingVector]) -> Result<(), ClientError> {
    if let Some(first) = vectors.first() {
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != first.len() {
                return Err(ClientError::DimensionMismatch {
                    expected: first.len(),
                    got: v.len(),
                    index,
                });
            }
        }
    }
    Ok(())
}

#[async_trait]
pub trait ModelClient: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;

    /// One vector per input text, in input order, all of equal dimension.
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;
}

#[async_trait]
impl<T: ModelClient + ?Sized> ModelClient for Arc<T> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).complete(request).await
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        (**self).embed(texts).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_vectors_rejected() {
        let v = vec![
            EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            EmbeddingVector::new(vec![1.0]).unwrap(),
        ];
        assert_eq!(
            check_dimensions(&v),
            Err(ClientError::DimensionMismatch { expected: 2, got: 1, index: 1 })
        );
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn request_needs_messages() {
        let tag = RequestTag {
            sample_id: "s".into(),
            step: Step::Ffc,
            attempt: 1,
        };
        let img = ImagePayload::new(vec![1], "image/png");
        assert!(ChatRequest::with_messages(img, vec![], tag).is_err());
    }

    #[test]
    fn media_types() {
        assert_eq!(ImagePayload::media_type_for(Path::new("a.PNG")), "image/png");
        assert_eq!(ImagePayload::media_type_for(Path::new("a.jpg")), "image/jpeg");
    }
}
