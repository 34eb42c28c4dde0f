use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_dimensions, ChatRequest, ChatResponse, ClientError, EmbeddingVector, ModelClient, Usage};

/// Fixture keys for embeddings are `embed/<text>`.
pub const MOCK_EMBED_PREFIX: &str = "embed/";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FixtureValue {
    Reply(String),
    Vector(Vec<f64>),
}

/// Replays canned replies keyed by `sample_id/step/attempt` and canned
/// embeddings keyed by `embed/<text>`. Replies depend only on the key, so two
/// runs over the same fixtures are byte-identical.
#[derive(Debug, Default)]
pub struct ScriptedMock {
    replies: BTreeMap<String, String>,
    embeddings: BTreeMap<String, Vec<f64>>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, ClientError> {
        let raw: BTreeMap<String, FixtureValue> =
            serde_json::from_str(text).map_err(|e| ClientError::Decode(format!("fixture file: {e}")))?;
        let mut mock = ScriptedMock::new();
        for (key, value) in raw {
            match (key.strip_prefix(MOCK_EMBED_PREFIX), value) {
                (Some(text), FixtureValue::Vector(v)) => mock = mock.with_embedding(text, v),
                (None, FixtureValue::Reply(r)) => mock = mock.with_reply(key, r),
                (Some(_), FixtureValue::Reply(_)) => {
                    return Err(ClientError::Decode(format!("fixture `{key}` must be a number array")))
                }
                (None, FixtureValue::Vector(_)) => {
                    return Err(ClientError::Decode(format!("fixture `{key}` must be a string")))
                }
            }
        }
        Ok(mock)
    }

    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Decode(format!("cannot read fixtures {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn with_reply(mut self, key: impl Into<String>, text: impl Into<String>) -> Self {
        self.replies.insert(key.into(), text.into());
        self
    }

    pub fn with_embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }

    pub fn to_json(&self) -> String {
        let mut all: BTreeMap<String, FixtureValue> = self
            .replies
            .iter()
            .map(|(k, v)| (k.clone(), FixtureValue::Reply(v.clone())))
            .collect();
        for (text, v) in &self.embeddings {
            all.insert(format!("{MOCK_EMBED_PREFIX}{text}"), FixtureValue::Vector(v.clone()));
        }
        serde_json::to_string_pretty(&all).expect("fixtures serialize")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ModelClient for ScriptedMock {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let key = request.tag.fixture_key();
        let text = self.replies.get(&key).ok_or(ClientError::MockMiss { key })?;
        Ok(ChatResponse {
            text: text.trim_end().to_string(),
            usage: Usage::default(),
            latency_ms: 0,
        })
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        let vectors = texts
            .iter()
            .map(|t| {
                self.embeddings
                    .get(t)
                    .ok_or_else(|| ClientError::MockMiss {
                        key: format!("{MOCK_EMBED_PREFIX}{t}"),
                    })
                    .and_then(|v| EmbeddingVector::new(v.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_dimensions(&vectors)?;
        Ok(vectors)
    }
}
