//! Deterministic scripted backend for tests and offline runs.
//!
//! A script is a list of rules tried in order of specificity: exact
//! prompt digest, then call index, then substring matching over the
//! rendered conversation, then an optional catch-all default. The
//! backend records every call so tests can assert on call shape and
//! prompt content.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::backend::{prompt_digest, ChatBackend, ChatError, ChatMessage, GenerationParams};

/// One scripted response. Exactly which calls it answers depends on
/// which selectors are set; a rule with none set never matches.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Match the 0-based call index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    /// Match the exact prompt digest (see `prompt_digest`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    /// Match when every listed substring appears somewhere in the
    /// conversation (system and user contents concatenated).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<Vec<String>>,
    pub completion: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Served when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule_digest(mut self, digest: impl Into<String>, completion: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            digest: Some(digest.into()),
            completion: completion.into(),
            ..MockRule::default()
        });
        self
    }

    pub fn rule_index(mut self, index: u64, completion: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            index: Some(index),
            completion: completion.into(),
            ..MockRule::default()
        });
        self
    }

    pub fn rule_contains(mut self, needles: &[&str], completion: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            contains: Some(needles.iter().map(|s| s.to_string()).collect()),
            completion: completion.into(),
            ..MockRule::default()
        });
        self
    }

    pub fn with_default(mut self, completion: impl Into<String>) -> Self {
        self.default = Some(completion.into());
        self
    }

    pub fn from_file(path: &Path) -> Result<Self, ChatError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ChatError::Unavailable { cause: format!("{}: {e}", path.display()) })?;
        serde_json::from_str(&text)
            .map_err(|e| ChatError::Unavailable { cause: format!("{}: {e}", path.display()) })
    }
}

/// One recorded backend call.
#[derive(Debug, Clone)]
pub struct MockCall {
    pub index: u64,
    pub digest: String,
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub completion: String,
}

#[derive(Default)]
struct MockState {
    next_index: u64,
    log: Vec<MockCall>,
}

pub struct MockChatBackend {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockChatBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script, state: Mutex::new(MockState::default()) }
    }

    pub fn from_script_file(path: &Path) -> Result<Self, ChatError> {
        Ok(Self::new(MockScript::from_file(path)?))
    }

    pub fn call_count(&self) -> u64 {
        self.state.lock().expect("mock state poisoned").next_index
    }

    pub fn call_log(&self) -> Vec<MockCall> {
        self.state.lock().expect("mock state poisoned").log.clone()
    }

    fn pick(&self, call_index: u64, digest: &str, haystack: &str) -> Option<String> {
        let by_digest = self
            .script
            .rules
            .iter()
            .find(|r| r.digest.as_deref() == Some(digest));
        let by_index = self.script.rules.iter().find(|r| r.index == Some(call_index));
        let by_contains = self.script.rules.iter().find(|r| {
            r.contains
                .as_ref()
                .is_some_and(|needles| !needles.is_empty() && needles.iter().all(|n| haystack.contains(n.as_str())))
        });
        by_digest
            .or(by_index)
            .or(by_contains)
            .map(|r| r.completion.clone())
            .or_else(|| self.script.default.clone())
    }
}

impl ChatBackend for MockChatBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, ChatError> {
        let digest = prompt_digest(messages);
        let haystack: String =
            messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let mut state = self.state.lock().expect("mock state poisoned");
        let call_index = state.next_index;
        state.next_index += 1;
        let completion = self.pick(call_index, &digest, &haystack).ok_or(ChatError::NoScriptMatch {
            call_index,
            digest: digest.clone(),
        })?;
        state.log.push(MockCall {
            index: call_index,
            digest,
            messages: messages.to_vec(),
            params: params.clone(),
            completion: completion.clone(),
        });
        Ok(completion)
    }
}
