//! Chat-completion backends: the trait, generation parameters, prompt
//! digests, and an HTTP client for OpenAI-style chat endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("chat backend unavailable: {cause}")]
    Unavailable { cause: String },
    #[error("mock script has no rule for call {call_index} (prompt digest {digest})")]
    NoScriptMatch { call_index: u64, digest: String },
}

/// Message roles. Conversations here are system/user only; agents never
/// see each other's outputs, so there is no assistant history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// Decoding parameters for one completion call. `retry_limit` bounds the
/// number of format-reminder re-asks after an unparseable completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_limit: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, retry_limit: 3 }
    }
}

/// A chat-completion backend. Implementations must be safe for
/// concurrent use; the pipeline may issue independent calls in parallel.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn send(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, ChatError>;
}

/// Stable hex digest of a rendered conversation. Used to key candidates
/// to their prompts and to address mock-script rules.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for message in messages {
        hasher.update(match message.role {
            Role::System => b"S",
            Role::User => b"U",
        });
        hasher.update([0x1f]);
        hasher.update(message.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

/// Settings for a remote chat-completion endpoint. The endpoint accepts
/// `{"model", "messages": [{"role", "content"}...], "temperature",
/// "max_tokens"}` and answers with the first choice's message content.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Bearer token, typically read from the environment variable named
    /// in the run configuration.
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub transport_retries: u32,
    pub backoff: Duration,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            transport_retries: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

pub struct HttpChatBackend {
    config: HttpBackendConfig,
    name: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl HttpChatBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, ChatError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ChatError::Unavailable { cause: e.to_string() })?;
        let name = format!("http:{}", config.model);
        Ok(Self { config, name, client })
    }
}

impl ChatBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, ChatError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages.iter().map(|m| {
                serde_json::json!({
                    "role": match m.role { Role::System => "system", Role::User => "user" },
                    "content": m.content,
                })
            }).collect::<Vec<_>>(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let mut last_error = String::new();
        for attempt in 0..self.config.transport_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self.client.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: ChatResponse = resp.json().map_err(|e| {
                            ChatError::Unavailable { cause: format!("bad response body: {e}") }
                        })?;
                        return parsed
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| ChatError::Unavailable {
                                cause: "response contained no choices".into(),
                            });
                    }
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    last_error = format!("status {status}");
                    if !retryable {
                        break;
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(ChatError::Unavailable {
            cause: format!(
                "{} after {} attempts: {last_error}",
                self.config.endpoint, self.config.transport_retries
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_order_sensitive() {
        let a = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        assert_eq!(prompt_digest(&a), prompt_digest(&a));
        let b = vec![ChatMessage::system("s"), ChatMessage::user("v")];
        assert_ne!(prompt_digest(&a), prompt_digest(&b));
        let c = vec![ChatMessage::user("u"), ChatMessage::system("s")];
        assert_ne!(prompt_digest(&a), prompt_digest(&c));
    }
}
