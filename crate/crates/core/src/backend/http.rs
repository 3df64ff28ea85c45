//! OpenAI-style chat-completion client.

use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, BackendError, GenerationParams, ModelResponse};
use crate::prompt::{Message, RenderedPrompt, Role};
use crate::tokens::estimate_tokens;

/// Bearer token for the endpoint; unset means unauthenticated.
pub const API_KEY_ENV: &str = "BIASPROMPT_API_KEY";

/// Appended to the prompt for one retry when a completion comes back empty
/// and the endpoint has no minimum-token field.
pub const MIN_TOKENS_NUDGE: &str = "Answer in at least one full sentence.";

/// Exponential backoff with jitter: attempt `i` waits a uniform draw from
/// `[d/2, d]` with `d = min(max_delay, base_delay * 2^i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ceiling = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
            .min(self.max_delay);
        if ceiling.is_zero() {
            return ceiling;
        }
        ceiling.mul_f64(rand::thread_rng().gen_range(0.5..=1.0))
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u32>,
    completion_tokens: Option<u32>,
}

struct Reply {
    text: String,
    usage: Option<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    min_tokens_field: Option<String>,
    id: String,
}

impl HttpBackend {
    /// Client for `{base_url}/chat/completions`, reading the bearer token
    /// from [`API_KEY_ENV`].
    pub fn new(base_url: &str, model: &str) -> Result<HttpBackend, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Failed {
                status: None,
                attempts: 0,
                message: e.to_string(),
            })?;
        let base = base_url.trim_end_matches('/');
        Ok(HttpBackend {
            client,
            url: format!("{base}/chat/completions"),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
            min_tokens_field: None,
            id: format!("http:{base}#{model}"),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> HttpBackend {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> HttpBackend {
        self.api_key = key;
        self
    }

    /// Send `min_new_tokens` under this request field (vLLM uses
    /// `min_tokens`) instead of nudging on empty completions.
    pub fn with_min_tokens_field(mut self, field: impl Into<String>) -> HttpBackend {
        self.min_tokens_field = Some(field.into());
        self
    }

    fn body(&self, messages: &[Message], params: &GenerationParams) -> Value {
        let wire: Vec<WireMessage> = messages
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                },
                content: &m.content,
            })
            .collect();
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": wire,
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
        });
        if let Some(field) = &self.min_tokens_field {
            body[field.as_str()] = params.min_new_tokens.into();
        }
        body
    }

    fn post_once(&self, body: &Value) -> Result<Reply, (bool, BackendError)> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            (
                true,
                BackendError::Failed {
                    status: None,
                    attempts: 0,
                    message: e.to_string(),
                },
            )
        })?;
        let status = resp.status();
        if !status.is_success() {
            let transient = status == StatusCode::TOO_MANY_REQUESTS
                || status == StatusCode::REQUEST_TIMEOUT
                || status.is_server_error();
            let text = resp.text().unwrap_or_default();
            return Err((
                transient,
                BackendError::Failed {
                    status: Some(status.as_u16()),
                    attempts: 0,
                    message: text.chars().take(500).collect(),
                },
            ));
        }
        let value: Value = resp.json().map_err(|e| {
            (
                false,
                BackendError::Protocol(format!("response is not JSON: {e}")),
            )
        })?;
        parse_reply(&value).map_err(|e| (false, e))
    }

    fn post(&self, body: &Value) -> Result<Reply, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(reply) => return Ok(reply),
                Err((transient, err)) => {
                    let attempts = attempt + 1;
                    if !transient || attempt >= self.retry.retries {
                        return Err(match err {
                            BackendError::Failed {
                                status, message, ..
                            } => BackendError::Failed {
                                status,
                                attempts,
                                message,
                            },
                            other => other,
                        });
                    }
                    log::debug!("attempt {attempts} against {} failed: {err}", self.url);
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

fn parse_reply(value: &Value) -> Result<Reply, BackendError> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?
        .to_string();
    let usage = value
        .get("usage")
        .and_then(|u| serde_json::from_value::<Usage>(u.clone()).ok())
        .and_then(|u| Some((u.prompt_tokens?, u.completion_tokens?)));
    Ok(Reply { text, usage })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError> {
        let start = Instant::now();
        let mut messages = prompt.messages.clone();
        let mut reply = self.post(&self.body(&messages, params))?;
        let mut prompt_texts: Vec<String> = messages.iter().map(|m| m.content.clone()).collect();
        let mut replies = vec![];

        if reply.text.trim().is_empty()
            && params.min_new_tokens > 0
            && self.min_tokens_field.is_none()
        {
            if let Some(last) = messages.iter_mut().rev().find(|m| m.role == Role::User) {
                last.content = format!("{}\n\n{MIN_TOKENS_NUDGE}", last.content);
            }
            let first = std::mem::replace(&mut reply, self.post(&self.body(&messages, params))?);
            replies.push(first);
            prompt_texts.extend(messages.iter().map(|m| m.content.clone()));
        }
        replies.push(reply);

        let estimated = replies.iter().any(|r| r.usage.is_none());
        let (prompt_tokens, completion_tokens) = if estimated {
            let p: u32 = prompt_texts.iter().map(|t| estimate_tokens(t)).sum();
            let c: u32 = replies.iter().map(|r| estimate_tokens(&r.text)).sum();
            (p, c)
        } else {
            replies.iter().fold((0, 0), |(p, c), r| {
                let (rp, rc) = r.usage.unwrap_or_default();
                (p + rp, c + rc)
            })
        };
        let text = replies.pop().map(|r| r.text).unwrap_or_default();
        Ok(ModelResponse {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            usage_estimated: estimated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::TemplateSet;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    #[derive(Debug, Clone)]
    struct Seen {
        auth: Option<String>,
        body: Value,
    }

    /// Serves scripted `(status, body)` replies in order, repeating the last.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = None;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    auth,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let (status, text) = replies[i.min(replies.len() - 1)].clone();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1/"), seen)
    }

    fn ok(text: &str, usage: Option<(u32, u32)>) -> (u16, String) {
        let mut v =
            serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
        if let Some((p, c)) = usage {
            v["usage"] = serde_json::json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
        }
        (200, v.to_string())
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn prompt() -> RenderedPrompt {
        TemplateSet::default()
            .render_reasoning_generation("Which?", "this")
            .unwrap()
    }

    #[test]
    fn wire_shape_and_usage() {
        let (url, seen) = serve(vec![ok("So the answer is: A", Some((12, 5)))]);
        let backend = HttpBackend::new(&url, "mistral-7b")
            .unwrap()
            .with_api_key(Some("sekrit".into()));
        let r = backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap();
        assert_eq!(r.text, "So the answer is: A");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (12, 5));
        assert!(!r.usage_estimated);
        let seen = seen.lock().unwrap();
        let body = &seen[0].body;
        assert_eq!(body["model"], "mistral-7b");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 256);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], prompt().user_text());
        assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekrit"));
    }

    #[test]
    fn always_failing_endpoint_is_asked_one_plus_retries_times() {
        let (url, seen) = serve(vec![(503, "busy".into())]);
        let backend = HttpBackend::new(&url, "m")
            .unwrap()
            .with_retry(fast())
            .with_api_key(None);
        match backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap_err()
        {
            BackendError::Failed {
                status, attempts, ..
            } => {
                assert_eq!(status, Some(503));
                assert_eq!(attempts, 4);
            }
            e => panic!("{e}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 4);
        assert!(seen.lock().unwrap()[0].auth.is_none());
    }

    #[test]
    fn transient_failure_then_success() {
        let (url, seen) = serve(vec![
            (500, "oops".into()),
            (429, "slow".into()),
            ok("fine", Some((1, 1))),
        ]);
        let backend = HttpBackend::new(&url, "m").unwrap().with_retry(fast());
        assert_eq!(
            backend
                .complete(&prompt(), &GenerationParams::default())
                .unwrap()
                .text,
            "fine"
        );
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, "bad request".into())]);
        let backend = HttpBackend::new(&url, "m").unwrap().with_retry(fast());
        let err = backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap_err();
        assert!(matches!(
            err,
            BackendError::Failed {
                status: Some(400),
                attempts: 1,
                ..
            }
        ));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn missing_content_is_a_protocol_error() {
        let (url, _) = serve(vec![(200, r#"{"choices": []}"#.into())]);
        let backend = HttpBackend::new(&url, "m").unwrap().with_retry(fast());
        assert!(matches!(
            backend.complete(&prompt(), &GenerationParams::default()),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn missing_usage_is_estimated_and_flagged() {
        let (url, _) = serve(vec![ok("abcdefgh", None)]);
        let backend = HttpBackend::new(&url, "m").unwrap();
        let r = backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap();
        assert!(r.usage_estimated);
        assert_eq!(r.completion_tokens, 2);
        assert_eq!(r.prompt_tokens, estimate_tokens(prompt().user_text()));
    }

    #[test]
    fn empty_completion_triggers_one_nudge() {
        let (url, seen) = serve(vec![
            ok("", Some((10, 0))),
            ok("A full sentence.", Some((15, 4))),
        ]);
        let backend = HttpBackend::new(&url, "m").unwrap();
        let r = backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap();
        assert_eq!(r.text, "A full sentence.");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (25, 4));
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].body["messages"][0]["content"]
            .as_str()
            .unwrap()
            .ends_with(MIN_TOKENS_NUDGE));
    }

    #[test]
    fn min_tokens_field_replaces_nudge() {
        let (url, seen) = serve(vec![ok("", Some((10, 0)))]);
        let backend = HttpBackend::new(&url, "m")
            .unwrap()
            .with_min_tokens_field("min_tokens");
        let r = backend
            .complete(&prompt(), &GenerationParams::default())
            .unwrap();
        assert_eq!(r.text, "");
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].body["min_tokens"], 1);
    }

    #[test]
    fn backoff_is_bounded() {
        let p = RetryPolicy::default();
        for attempt in 0..40 {
            let d = p.delay(attempt);
            assert!(d <= p.max_delay);
        }
        assert!(p.delay(0) >= Duration::from_millis(250));
    }
}
