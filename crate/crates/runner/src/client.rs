//! Chat-completions client with retries.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    /// `http(s)://` or `data:` URL
    pub image_url: Option<String>,
}

impl ChatRequest {
    pub fn to_json(&self) -> Value {
        let mut content = vec![json!({"type": "text", "text": self.user})];
        if let Some(url) = &self.image_url {
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": content},
            ],
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    /// The reply arrived but has no message text; the body is kept verbatim.
    #[error("malformed reply: {0}")]
    Malformed(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            ClientError::Malformed(_) => false,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

/// Message text of a chat-completions reply body.
pub fn extract_text(body: &str) -> Result<String, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|_| ClientError::Malformed(body.to_string()))?;
    match &v["choices"][0]["message"]["content"] {
        Value::String(s) => Ok(s.clone()),
        // some servers return content parts
        Value::Array(parts) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            if text.is_empty() {
                Err(ClientError::Malformed(body.to_string()))
            } else {
                Ok(text.concat())
            }
        }
        _ => Err(ClientError::Malformed(body.to_string())),
    }
}

pub struct HttpClient {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(HttpClient {
            endpoint: endpoint.to_string(),
            api_key,
            http,
        })
    }

    /// Reads the key from the credential environment variable.
    pub fn from_env(endpoint: &str, timeout: Duration) -> Result<Self, ClientError> {
        let key = std::env::var(crate::config::API_KEY_ENV).ok().filter(|k| !k.is_empty());
        HttpClient::new(endpoint, key, timeout)
    }
}

impl ChatClient for HttpClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut req = self.http.post(&self.endpoint).json(&request.to_json());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Status { status, body });
        }
        extract_text(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

/// Up to `1 + retries` attempts; retryable failures wait `backoff · 2^k`.
pub fn complete_with_retry(
    client: &dyn ChatClient,
    request: &ChatRequest,
    policy: RetryPolicy,
) -> Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        match client.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_retryable() && attempt < policy.retries => {
                log::debug!("attempt {} failed: {e}", attempt + 1);
                let wait = policy.backoff.saturating_mul(2u32.saturating_pow(attempt));
                std::thread::sleep(wait);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: ClientError,
    }

    impl ChatClient for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok("<answer>no</answer>".into())
            }
        }
    }

    fn req() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            system: "s".into(),
            user: "u".into(),
            image_url: Some("data:image/png;base64,AA==".into()),
        }
    }

    const FAST: RetryPolicy = RetryPolicy {
        retries: 3,
        backoff: Duration::ZERO,
    };

    #[test]
    fn three_transient_failures_then_success() {
        let c = Flaky {
            failures: 3,
            calls: AtomicU32::new(0),
            error: ClientError::Transport("reset".into()),
        };
        assert_eq!(complete_with_retry(&c, &req(), FAST).unwrap(), "<answer>no</answer>");
        assert_eq!(c.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn gives_up_after_retries() {
        let c = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
            error: ClientError::Status { status: 503, body: "busy".into() },
        };
        assert!(complete_with_retry(&c, &req(), FAST).is_err());
        assert_eq!(c.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let c = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
            error: ClientError::Status { status: 400, body: "bad".into() },
        };
        assert!(complete_with_retry(&c, &req(), FAST).is_err());
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn wire_format() {
        let v = req().to_json();
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AA==");
        assert_eq!(
            extract_text(r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#).unwrap(),
            "hi"
        );
        assert_eq!(
            extract_text(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#)
                .unwrap(),
            "ab"
        );
        assert_eq!(extract_text("oops"), Err(ClientError::Malformed("oops".into())));
        assert_eq!(extract_text(r#"{"error":"x"}"#), Err(ClientError::Malformed(r#"{"error":"x"}"#.into())));
    }
}
