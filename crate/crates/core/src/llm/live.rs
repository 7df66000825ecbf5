use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, CallSlot, LlmError, LlmRequest};

pub const ENV_BASE_URL: &str = "ATTEST_LLM_BASE_URL";
pub const ENV_MODEL: &str = "ATTEST_LLM_MODEL";
pub const ENV_API_KEY: &str = "ATTEST_LLM_API_KEY";

const MAX_ATTEMPTS: u32 = 3;

/// Generic chat-completion client (`POST {base}/chat/completions`).
pub struct LiveBackend {
    base_url: String,
    model: String,
    api_key: String,
    temperature: f64,
    backoff_base: Duration,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(base_url: &str, model: &str, api_key: &str, temperature: f64) -> Result<Self, LlmError> {
        if api_key.trim().is_empty() {
            return Err(LlmError::Config(format!("{ENV_API_KEY} is empty")));
        }
        if base_url.trim().is_empty() || model.trim().is_empty() {
            return Err(LlmError::Config("base URL and model must be set".into()));
        }
        Ok(LiveBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: api_key.to_string(),
            temperature,
            backoff_base: Duration::from_secs(1),
            agent: ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(10)).timeout(Duration::from_secs(300)).build(),
        })
    }

    /// Reads the endpoint from `ATTEST_LLM_*`; fails before any network
    /// access when a variable is missing.
    pub fn from_env(temperature: f64) -> Result<Self, LlmError> {
        let var = |name: &str| std::env::var(name).map_err(|_| LlmError::Config(format!("{name} is not set")));
        let key = var(ENV_API_KEY)?;
        let base = var(ENV_BASE_URL)?;
        let model = var(ENV_MODEL)?;
        Self::new(&base, &model, &key, temperature)
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let url = format!("{}/chat/completions", self.base_url);
        let resp = self.agent.post(&url).set("Authorization", &format!("Bearer {}", self.api_key)).send_json(body.clone());
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let detail = format!("HTTP {code}: {}", r.into_string().unwrap_or_default().chars().take(200).collect::<String>());
                return Err(match code {
                    401 | 403 => Attempt::Fatal(LlmError::Auth(detail)),
                    500..=599 => Attempt::Retry(detail),
                    _ => Attempt::Fatal(LlmError::Protocol(detail)),
                });
            }
            Err(ureq::Error::Transport(t)) => return Err(Attempt::Retry(t.to_string())),
        };
        let value: Value = resp.into_json().map_err(|e| Attempt::Retry(format!("reading response: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(LlmError::Protocol("response lacks choices[0].message.content".into())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(LlmError),
}

impl Backend for LiveBackend {
    fn complete(&mut self, request: &LlmRequest, _slot: CallSlot) -> Result<String, LlmError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
        });
        let mut delay = self.backoff_base;
        let mut last = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    last = msg;
                    if attempt < MAX_ATTEMPTS {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(LlmError::Transport { attempts: MAX_ATTEMPTS, message: last })
    }
}
