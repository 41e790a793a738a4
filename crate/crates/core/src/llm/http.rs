//! OpenAI-compatible HTTP client for chat completions and embeddings.

use std::env;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::embed::{check_texts, EmbeddingProvider, EmbeddingVector};
use super::{CompletionProvider, CompletionRequest, ProviderError};
use crate::error::{Error, Result};

pub const ENV_BASE_URL: &str = "PANKRAG_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "PANKRAG_LLM_API_KEY";
pub const ENV_MODEL: &str = "PANKRAG_LLM_MODEL";
pub const ENV_EMBED_MODEL: &str = "PANKRAG_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    /// Never serialized into traces.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            model: "gpt-4o-mini".into(),
            embed_model: "bge-m3".into(),
            embed_dim: 1024,
            timeout_secs: 120,
        }
    }
}

impl HttpConfig {
    /// Defaults overlaid with whichever `PANKRAG_*` variables are set.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        c.apply_env();
        c
    }

    pub fn apply_env(&mut self) {
        if let Ok(v) = env::var(ENV_BASE_URL) {
            self.base_url = v;
        }
        if let Ok(v) = env::var(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Ok(v) = env::var(ENV_MODEL) {
            self.model = v;
        }
        if let Ok(v) = env::var(ENV_EMBED_MODEL) {
            self.embed_model = v;
        }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

fn classify_status(status: u16, body: &str) -> ProviderError {
    let msg = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    if status == 429 || status >= 500 {
        ProviderError::Transient(msg)
    } else {
        ProviderError::Fatal(msg)
    }
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self.agent.post(&self.config.endpoint(path));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transient(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(format!("reading body failed: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(format!("bad JSON body: {e}")))
    }
}

impl CompletionProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest, prompt: &str) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let v = self.post("chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Fatal("response has no choices[0].message.content".into()))
    }
}

impl EmbeddingProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.embed_model
    }

    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        check_texts(texts)?;
        let body = json!({"model": self.config.embed_model, "input": texts});
        let v = self.post("embeddings", &body).map_err(|e| match e {
            ProviderError::Transient(m) | ProviderError::Fatal(m) => Error::Transport(m),
        })?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| Error::Transport("embedding response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(Error::Transport(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item["index"].as_u64().map(|x| x as usize).unwrap_or(i);
                let values = item["embedding"]
                    .as_array()
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default();
                (idx, values)
            })
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        rows.into_iter()
            .map(|(_, values)| {
                if values.len() != self.config.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding dimension {} does not match configured {}",
                        values.len(),
                        self.config.embed_dim
                    )));
                }
                EmbeddingVector::normalized(values)
            })
            .collect()
    }
}
