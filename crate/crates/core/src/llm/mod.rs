//! Provider contracts for text completion and embeddings.
//!
//! Every pipeline LLM call goes through [`Gateway`], which renders the
//! template, enforces the retry cap, rate-limits real providers and records a
//! replayable [`CallRecord`] per logical request.

pub mod embed;
pub mod http;
pub mod mock;
pub mod templates;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use embed::{EmbeddingProvider, EmbeddingVector, MockEmbedder};
pub use mock::MockLlm;
pub use templates::{Template, TemplateRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: String,
    pub variables: BTreeMap<String, String>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(template_id: &str) -> Self {
        Self {
            template_id: template_id.to_string(),
            variables: BTreeMap::new(),
            max_output_tokens: 1024,
            temperature: 0.0,
        }
    }

    pub fn var(mut self, key: &str, value: impl Into<String>) -> Self {
        self.variables.insert(key.to_string(), value.into());
        self
    }

    pub fn max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    /// sha256 over the canonical JSON form (variables are key-sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, 429, 5xx.
    Transient(String),
    Fatal(String),
}

pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    /// `prompt` is the rendered template; `request` carries the template id
    /// and variables for providers that dispatch on them.
    fn complete(&self, request: &CompletionRequest, prompt: &str)
        -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Maximum provider calls per logical request, first attempt included.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 1).min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Spaces calls at least `1 / rate` seconds apart across all threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_sec: Option<f64>) -> Self {
        let interval = requests_per_sec
            .filter(|r| *r > 0.0 && r.is_finite())
            .map(|r| Duration::from_secs_f64(1.0 / r));
        Self {
            interval,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    pub fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub template_id: String,
    pub request_hash: String,
    pub request: CompletionRequest,
    pub attempts: u32,
    pub ok: bool,
}

pub type CallLog = Arc<Mutex<Vec<CallRecord>>>;

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    templates: Arc<TemplateRegistry>,
    retry: RetryPolicy,
    limiter: Arc<RateLimiter>,
    log: Option<CallLog>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn CompletionProvider>, templates: TemplateRegistry) -> Self {
        Self {
            provider,
            templates: Arc::new(templates),
            retry: RetryPolicy::default(),
            limiter: Arc::new(RateLimiter::unlimited()),
            log: None,
        }
    }

    /// Deterministic gateway over the rule-based mock provider.
    pub fn mock(mock: MockLlm) -> Self {
        Self::new(Arc::new(mock), TemplateRegistry::builtin()).with_retry(RetryPolicy::immediate(3))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_sec: Option<f64>) -> Self {
        self.limiter = Arc::new(RateLimiter::new(requests_per_sec));
        self
    }

    /// Clone that appends every call to `log`.
    pub fn recording(&self, log: CallLog) -> Self {
        let mut g = self.clone();
        g.log = Some(log);
        g
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.complete_parsed(request, |raw| Ok(raw.to_string()))
    }

    /// Call the provider and parse the response, retrying transient provider
    /// failures and parse failures until the attempt cap is reached.
    pub fn complete_parsed<T>(
        &self,
        request: &CompletionRequest,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let prompt = self
            .templates
            .get(&request.template_id)?
            .render(&request.variables)?;
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempts = 0;
        let mut last_err: Option<Error> = None;
        let mut outcome = None;
        while attempts < max_attempts {
            thread::sleep(self.retry.delay_before(attempts));
            self.limiter.acquire();
            attempts += 1;
            match self.provider.complete(request, &prompt) {
                Ok(raw) => match parse(&raw) {
                    Ok(v) => {
                        outcome = Some(v);
                        break;
                    }
                    Err(reason) => {
                        last_err = Some(Error::Extraction {
                            template: request.template_id.clone(),
                            reason,
                            raw,
                        })
                    }
                },
                Err(ProviderError::Transient(m)) => last_err = Some(Error::Transport(m)),
                Err(ProviderError::Fatal(m)) => {
                    last_err = Some(Error::Transport(m));
                    break;
                }
            }
        }
        if let Some(log) = &self.log {
            log.lock().unwrap().push(CallRecord {
                template_id: request.template_id.clone(),
                request_hash: request.hash(),
                request: request.clone(),
                attempts,
                ok: outcome.is_some(),
            });
        }
        match outcome {
            Some(v) => Ok(v),
            None => Err(last_err.unwrap_or_else(|| Error::Transport("no attempt made".into()))),
        }
    }
}

/// Pull a JSON value out of a model response: a fenced block if present,
/// otherwise the outermost `{...}` span.
pub fn extract_json(raw: &str) -> std::result::Result<serde_json::Value, String> {
    let fenced = raw.find("```").and_then(|start| {
        let after = &raw[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        body.find("```").map(|end| &body[..end])
    });
    let candidate = match fenced {
        Some(body) => body.trim(),
        None => {
            let open = raw.find('{').ok_or("no JSON object in response")?;
            let close = raw.rfind('}').ok_or("no JSON object in response")?;
            if close < open {
                return Err("no JSON object in response".into());
            }
            &raw[open..=close]
        }
    };
    serde_json::from_str(candidate).map_err(|e| format!("invalid JSON: {e}"))
}

pub fn parse_json<T: serde::de::DeserializeOwned>(raw: &str) -> std::result::Result<T, String> {
    let value = extract_json(raw)?;
    serde_json::from_value(value).map_err(|e| format!("schema mismatch: {e}"))
}
