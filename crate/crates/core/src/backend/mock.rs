//! Scripted backend keyed by prompt content hash.
//!
//! Fixture files hold one JSON object per line:
//!
//! ```text
//! {"hash": "<content_hash>", "text": "So the answer is: A", "prompt_tokens": 10, "completion_tokens": 7, "fail": false}
//! ```
//!
//! `latency_ms` is optional. A line whose hash is `*` is the response for
//! prompts not in the table.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationParams, ModelResponse};
use crate::prompt::RenderedPrompt;

pub const DEFAULT_HASH: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub hash: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub prompt_tokens: u32,
    #[serde(default)]
    pub completion_tokens: u32,
    #[serde(default)]
    pub fail: bool,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub latency_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl MockEntry {
    /// Entry for the default slot with zero usage.
    pub fn text(text: impl Into<String>) -> MockEntry {
        MockEntry {
            hash: DEFAULT_HASH.to_string(),
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            fail: false,
            latency_ms: 0,
        }
    }

    pub fn for_prompt(prompt: &RenderedPrompt, text: impl Into<String>) -> MockEntry {
        MockEntry {
            hash: prompt.content_hash.clone(),
            ..MockEntry::text(text)
        }
    }

    pub fn usage(mut self, prompt_tokens: u32, completion_tokens: u32) -> MockEntry {
        self.prompt_tokens = prompt_tokens;
        self.completion_tokens = completion_tokens;
        self
    }

    pub fn latency(mut self, ms: u64) -> MockEntry {
        self.latency_ms = ms;
        self
    }

    pub fn failing(mut self) -> MockEntry {
        self.fail = true;
        self
    }
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    table: HashMap<String, MockEntry>,
    default: Option<MockEntry>,
    sleep: bool,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> MockBackend {
        MockBackend {
            id: id.into(),
            table: HashMap::new(),
            default: None,
            sleep: false,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_entries(
        id: impl Into<String>,
        entries: impl IntoIterator<Item = MockEntry>,
    ) -> MockBackend {
        let mut mock = MockBackend::new(id);
        for e in entries {
            mock.insert(e);
        }
        mock
    }

    pub fn from_fixture(path: &Path) -> Result<MockBackend, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Fixture(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let id = format!(
            "mock:{}",
            path.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("fixture")
        );
        Ok(MockBackend::from_entries(id, entries))
    }

    pub fn insert(&mut self, entry: MockEntry) {
        if entry.hash == DEFAULT_HASH {
            self.default = Some(entry);
        } else {
            self.table.insert(entry.hash.clone(), entry);
        }
    }

    pub fn with_default(mut self, entry: MockEntry) -> MockBackend {
        self.default = Some(MockEntry {
            hash: DEFAULT_HASH.to_string(),
            ..entry
        });
        self
    }

    /// Sleep for each entry's scripted latency before answering.
    pub fn with_simulated_latency(mut self) -> MockBackend {
        self.sleep = true;
        self
    }

    /// Requests answered so far, including scripted failures.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(
        &self,
        prompt: &RenderedPrompt,
        _params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let entry = self
            .table
            .get(&prompt.content_hash)
            .or(self.default.as_ref())
            .ok_or_else(|| BackendError::Failed {
                status: None,
                attempts: 1,
                message: format!("no scripted response for prompt {}", prompt.content_hash),
            })?;
        if self.sleep && entry.latency_ms > 0 {
            thread::sleep(Duration::from_millis(entry.latency_ms));
        }
        if entry.fail {
            return Err(BackendError::Injected {
                hash: prompt.content_hash.clone(),
            });
        }
        Ok(ModelResponse {
            text: entry.text.clone(),
            prompt_tokens: entry.prompt_tokens,
            completion_tokens: entry.completion_tokens,
            latency_ms: entry.latency_ms,
            backend_id: self.id.clone(),
            usage_estimated: false,
        })
    }
}
