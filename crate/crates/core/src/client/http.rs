use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{check_dimensions, ChatRequest, ChatResponse, ClientError, EmbeddingVector, ModelClient, Usage};

/// Connection settings for a chat-completions compatible server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub chat_path: String,
    pub embeddings_path: String,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    /// Retries for connection failures and timeouts, separate from the
    /// off-target retry budget.
    pub transport_retries: u32,
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            chat_path: "/chat/completions".into(),
            embeddings_path: "/embeddings".into(),
            model: "llava".into(),
            embedding_model: "clip".into(),
            api_key_env: None,
            max_tokens: 512,
            timeout_secs: 120,
            transport_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }
}

pub struct HttpClient {
    config: EndpointConfig,
    http: reqwest::Client,
    api_key: Option<String>,
    in_flight: Semaphore,
}

impl HttpClient {
    pub fn new(config: EndpointConfig, concurrency_limit: usize) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        Ok(HttpClient {
            config,
            http,
            api_key,
            in_flight: Semaphore::new(concurrency_limit.max(1)),
        })
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self.config.backoff_ms.saturating_mul(1u64 << retry.min(16));
        Duration::from_millis(ms.min(30_000))
    }

    async fn post_json(&self, url: &str, body: &Value) -> Result<Value, ClientError> {
        let mut retry = 0;
        loop {
            let result = self.post_once(url, body).await;
            match result {
                Err(ClientError::Transport(_)) if retry < self.config.transport_retries => {
                    tokio::time::sleep(self.backoff(retry)).await;
                    retry += 1;
                }
                other => return other,
            }
        }
    }

    async fn post_once(&self, url: &str, body: &Value) -> Result<Value, ClientError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| ClientError::Transport(error_chain(&e)))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| ClientError::Transport(error_chain(&e)))?;
        if !status.is_success() {
            return Err(ClientError::Endpoint {
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(format!("{e}: {}", excerpt(&text))))
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        out.push_str(": ");
        out.push_str(&s.to_string());
        source = s.source();
    }
    out
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 300;
    match body.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// Wire body for a chat-completions request. The image rides inline as a
/// base64 data URL attached to the first user message.
pub(crate) fn chat_body(request: &ChatRequest, model: &str) -> Value {
    let image = request.image();
    let data_url = format!(
        "data:{};base64,{}",
        image.media_type,
        base64::engine::general_purpose::STANDARD.encode(image.bytes.as_slice())
    );
    let first_user = request.messages().iter().position(|m| m.role == super::Role::User);
    let messages: Vec<Value> = request
        .messages()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if Some(i) == first_user {
                json!({
                    "role": m.role,
                    "content": [
                        {"type": "text", "text": m.text},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                })
            } else {
                json!({"role": m.role, "content": m.text})
            }
        })
        .collect();
    let model = if request.model_name.is_empty() { model } else { &request.model_name };
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<Value>,
}

pub(crate) fn parse_chat_reply(body: Value) -> Result<(String, Usage), ClientError> {
    let reply: ChatReply = serde_json::from_value(body).map_err(|e| ClientError::Decode(e.to_string()))?;
    let choice = reply
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ClientError::Decode("response has no choices".into()))?;
    let text = match choice.message.content {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s,
        // Some servers return content as a list of typed parts.
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Some(other) => return Err(ClientError::Decode(format!("unexpected content {other}"))),
    };
    Ok((text.trim_end().to_string(), reply.usage.unwrap_or_default()))
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

pub(crate) fn parse_embedding_reply(body: Value, expected: usize) -> Result<Vec<EmbeddingVector>, ClientError> {
    let reply: EmbeddingReply = serde_json::from_value(body).map_err(|e| ClientError::Decode(e.to_string()))?;
    if reply.data.len() != expected {
        return Err(ClientError::Decode(format!(
            "expected {expected} embeddings, got {}",
            reply.data.len()
        )));
    }
    let mut items: Vec<(usize, Vec<f64>)> = reply
        .data
        .into_iter()
        .enumerate()
        .map(|(pos, item)| (item.index.unwrap_or(pos), item.embedding))
        .collect();
    items.sort_by_key(|(i, _)| *i);
    if items.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
        return Err(ClientError::Decode("embedding indices are not 0..n".into()));
    }
    let vectors = items
        .into_iter()
        .map(|(_, v)| EmbeddingVector::new(v))
        .collect::<Result<Vec<_>, _>>()?;
    check_dimensions(&vectors)?;
    Ok(vectors)
}

#[async_trait]
impl ModelClient for HttpClient {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let body = chat_body(request, &self.config.model);
        let started = Instant::now();
        let reply = self.post_json(&self.config.url(&self.config.chat_path), &body).await?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let (text, usage) = parse_chat_reply(reply)?;
        Ok(ChatResponse { text, usage, latency_ms })
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({"model": self.config.embedding_model, "input": texts});
        let reply = self
            .post_json(&self.config.url(&self.config.embeddings_path), &body)
            .await?;
        parse_embedding_reply(reply, texts.len())
    }
}
