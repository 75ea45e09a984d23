//! Chat-completion client for any provider speaking the common
//! `/chat/completions` protocol.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, BackendError, Completion, Request};
use crate::validation::whitespace_tokens;

#[derive(Clone)]
pub struct RemoteSettings {
    pub api_base: String,
    pub model: String,
    pub api_key: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub timeout_seconds: u64,
}

impl std::fmt::Debug for RemoteSettings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteSettings")
            .field("api_base", &self.api_base)
            .field("model", &self.model)
            .field("api_key", &"<redacted>")
            .field("temperature", &self.temperature)
            .field("max_tokens", &self.max_tokens)
            .field("attempts", &self.attempts)
            .finish()
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    settings: RemoteSettings,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(settings: RemoteSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { settings, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.settings.api_base.trim_end_matches('/'))
    }

    fn attempt(&self, prompt: &str) -> Result<Completion, Attempt> {
        let body = json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let started = Instant::now();
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.settings.api_key))
            .send_json(&body)
            .map_err(|e| Attempt::Retry(BackendError::Network(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(BackendError::Network(e.to_string())))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(Attempt::Fatal(BackendError::Auth(format!("HTTP {status}")))),
            429 => return Err(Attempt::Retry(BackendError::RateLimited { attempts: 0 })),
            500..=599 => return Err(Attempt::Retry(BackendError::Network(format!("HTTP {status}")))),
            _ => {
                return Err(Attempt::Fatal(BackendError::InvalidResponse(format!(
                    "HTTP {status}: {}",
                    text.chars().take(200).collect::<String>()
                ))))
            }
        }
        let latency = started.elapsed().as_secs_f64();
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::InvalidResponse(e.to_string())))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Attempt::Fatal(BackendError::InvalidResponse("missing choices[0].message.content".into())))?
            .to_string();
        let usage = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64);
        Ok(Completion {
            prompt_tokens: usage("prompt_tokens").unwrap_or_else(|| whitespace_tokens(prompt)),
            completion_tokens: usage("completion_tokens").unwrap_or_else(|| whitespace_tokens(&content)),
            text: content,
            latency_seconds: latency,
        })
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    /// Retries network failures, 5xx and 429 with exponential backoff.
    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        let attempts = self.settings.attempts.max(1);
        let mut delay = Duration::from_millis(self.settings.backoff_ms);
        let mut last = BackendError::Network("no attempt made".into());
        for n in 1..=attempts {
            match self.attempt(request.prompt) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    last = match e {
                        BackendError::RateLimited { .. } => BackendError::RateLimited { attempts: n },
                        other => other,
                    };
                    if n < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last)
    }
}
