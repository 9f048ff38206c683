use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{mock_complete, EmotionPrompt, PromptError, PromptRequest, PromptSource};

pub const TOKEN_ENV: &str = "EMORAG_LLM_TOKEN";

pub trait LlmClient: Send + Sync {
    fn source(&self) -> PromptSource;
    fn complete(&self, request: &PromptRequest) -> Result<String, PromptError>;
    /// Requests this client is willing to have outstanding at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MockClient;

impl LlmClient for MockClient {
    fn source(&self) -> PromptSource {
        PromptSource::Mock
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, PromptError> {
        Ok(mock_complete(request))
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveClientConfig {
    pub base_url: String,
    pub model: String,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub attempts: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for LiveClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "gpt-4".into(),
            max_in_flight: 4,
            timeout_secs: 60,
            attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// Chat-completions client: one user message, temperature 0.
pub struct LiveClient {
    config: LiveClientConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

enum Failure {
    Retryable(String),
    Fatal(PromptError),
}

impl LiveClient {
    /// Reads the bearer token from `EMORAG_LLM_TOKEN` if set.
    pub fn new(config: LiveClientConfig) -> Result<Self, PromptError> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: LiveClientConfig, token: Option<String>) -> Result<Self, PromptError> {
        if config.attempts == 0 || config.max_in_flight == 0 || config.model.is_empty() {
            return Err(PromptError::Precondition(format!("invalid live client config: {config:?}")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, token, agent })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut req = self.agent.post(&self.url());
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(PromptError::Endpoint(format!("HTTP {status} from {}", self.url()))));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(PromptError::Protocol(format!("response is not JSON: {e}"))))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Failure::Fatal(PromptError::Protocol("response lacks choices[0].message.content".into())))?;
        Ok(content.to_owned())
    }
}

impl LlmClient for LiveClient {
    fn source(&self) -> PromptSource {
        PromptSource::Live(self.config.model.clone())
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, PromptError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.render()}],
            "temperature": 0,
        });
        let mut last = String::new();
        for attempt in 0..self.config.attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => last = msg,
            }
        }
        Err(PromptError::Endpoint(format!(
            "{} failed after {} attempts: {last}",
            self.url(),
            self.config.attempts
        )))
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}

/// Complete one request. Blank completions are a protocol error.
pub fn generate(request: &PromptRequest, client: &dyn LlmClient) -> Result<EmotionPrompt, PromptError> {
    let text = client.complete(request)?;
    if text.trim().is_empty() {
        return Err(PromptError::Protocol("LLM returned an empty completion".into()));
    }
    Ok(EmotionPrompt {
        text,
        source: client.source(),
        request_hash: request.request_hash.clone(),
        retrieved_ids: request.retrieved_ids(),
    })
}

/// Complete many requests with up to `client.max_in_flight()` outstanding.
/// Output order matches input order; the first failure by input position is
/// returned.
pub fn generate_batch(requests: &[PromptRequest], client: &dyn LlmClient) -> Result<Vec<EmotionPrompt>, PromptError> {
    let workers = client.max_in_flight().clamp(1, requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EmotionPrompt, PromptError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(generate(req, client));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}
