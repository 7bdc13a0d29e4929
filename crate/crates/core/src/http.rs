//! Minimal OpenAI-compatible chat-completions transport with a token-bucket
//! rate limit and retry on transient failures.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message} (after {attempts} attempt(s))")]
pub struct TransportError {
    pub message: String,
    pub status: Option<u16>,
    pub retryable: bool,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub requests_per_minute: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: String::new(),
            api_key_env: None,
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60,
            requests_per_minute: 60,
        }
    }
}

pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(rate: u32) -> Self {
        let capacity = rate.max(1) as f64;
        Self {
            capacity,
            per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until one token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_sec).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct ChatTransport {
    config: EndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    bucket: TokenBucket,
}

impl ChatTransport {
    pub fn new(config: EndpointConfig) -> Result<Self, TransportError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| TransportError {
                message: format!("environment variable {var} is not set"),
                status: None,
                retryable: false,
                attempts: 0,
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TransportError {
                message: e.to_string(),
                status: None,
                retryable: false,
                attempts: 0,
            })?;
        let bucket = TokenBucket::per_minute(config.requests_per_minute);
        Ok(Self {
            config,
            api_key,
            http,
            bucket,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Posts `{model, temperature, messages}` and returns the first choice's
    /// message content.
    pub fn complete(&self, messages: serde_json::Value) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.bucket.acquire();
            match self.post_once(&body) {
                Ok(text) => return Ok(text),
                Err(mut e) => {
                    e.attempts = attempts;
                    if !e.retryable || attempts > self.config.max_retries {
                        return Err(e);
                    }
                    tracing::warn!(attempt = attempts, error = %e.message, "chat request failed, retrying");
                    std::thread::sleep(Duration::from_millis(250 * 2u64.pow(attempts - 1)));
                }
            }
        }
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<String, TransportError> {
        let fail = |message: String, status: Option<u16>, retryable: bool| TransportError {
            message,
            status,
            retryable,
            attempts: 0,
        };
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| fail(e.to_string(), None, e.is_timeout() || e.is_connect()))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let text = resp.text().unwrap_or_default();
            return Err(fail(format!("HTTP {status}: {text}"), Some(status.as_u16()), retryable));
        }
        let value: serde_json::Value = resp.json().map_err(|e| fail(e.to_string(), None, false))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| fail("response has no choices[0].message.content".into(), None, false))
    }
}
