//! Chat-completion HTTP backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{GatewayError, GenerationRequest, Generator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> usize {
    3
}

pub struct HttpModel {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    token: Option<String>,
    retries: usize,
    backoff: Duration,
}

impl HttpModel {
    pub fn new(config: &EndpointConfig) -> Result<Self, GatewayError> {
        let token = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpModel {
            client,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model.clone(),
            token,
            retries: config.retries,
            backoff: Duration::from_millis(250),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let prompt = &request.prompt;
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.instruction},
                {"role": "user", "content": prompt.continuation_text()},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
            "stop": request.stop_markers,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl HttpModel {
    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let response = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {}", status.as_u16())));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(GatewayError::Http {
                status: status.as_u16(),
                body,
            }));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| Attempt::Fatal(GatewayError::InvalidResponse(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(GatewayError::InvalidResponse("no choices".into())))
    }
}

impl Generator for HttpModel {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let body = self.body(request);
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt as u32 - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    log::warn!("{} attempt {}/{} failed: {message}", self.url, attempt + 1, attempts);
                    last = message;
                }
            }
        }
        Err(GatewayError::EndpointUnreachable {
            url: self.url.clone(),
            attempts,
            message: last,
        })
    }
}
