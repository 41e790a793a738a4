//! Run configuration. Layers are merged as TOML tables with precedence
//! flags > config file > environment > defaults, then deserialized once.

use std::env;
use std::path::{Path, PathBuf};

use pankrag::community::DEFAULT_SCHEDULE;
use pankrag::engine::{Mode, QueryOptions};
use pankrag::index::IndexSettings;
use pankrag::ingest::ChunkingConfig;
use pankrag::llm::http::{HttpConfig, ENV_API_KEY, ENV_BASE_URL, ENV_EMBED_MODEL, ENV_MODEL};
use pankrag::llm::RetryPolicy;
use pankrag::rerank::RerankWeights;
use pankrag::retrieval::{LevelPolicy, LocalParams};
use pankrag::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PROVIDER: &str = "PANKRAG_PROVIDER";
pub const ENV_INDEX_DIR: &str = "PANKRAG_INDEX_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    pub model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub requests_per_sec: Option<f64>,
    /// Scripted planner transcripts for the mock provider.
    pub plan_scripts: Option<PathBuf>,
    /// Directory of `<template_id>.txt` overrides.
    pub templates_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityConfig {
    pub leiden_seed: u64,
    pub resolution_schedule: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_entities: usize,
    pub k_chunks: usize,
    pub k_communities: usize,
    pub level_policy: LevelPolicy,
    pub context_k: usize,
}

/// `weights = "auto"` or explicit `alpha`/`beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankConfig {
    pub weights: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub mode: Mode,
    pub synthesis_budget: usize,
    pub plan_fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_dir: Option<PathBuf>,
    pub corpus_manifest: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub suite: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workers: usize,
    pub provider: ProviderConfig,
    pub chunking: ChunkingConfig,
    pub community: CommunityConfig,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
    pub query: QueryConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        let q = QueryOptions::default();
        Self {
            workers: 4,
            provider: ProviderConfig {
                kind: ProviderKind::Mock,
                base_url: http.base_url,
                model: http.model,
                embed_model: http.embed_model,
                embed_dim: http.embed_dim,
                timeout_secs: http.timeout_secs,
                max_attempts: RetryPolicy::default().max_attempts,
                requests_per_sec: None,
                plan_scripts: None,
                templates_dir: None,
            },
            chunking: ChunkingConfig::default(),
            community: CommunityConfig {
                leiden_seed: IndexSettings::default().leiden_seed,
                resolution_schedule: DEFAULT_SCHEDULE.to_vec(),
            },
            retrieval: RetrievalConfig {
                k_entities: q.local.k_entities,
                k_chunks: q.local.k_chunks,
                k_communities: q.k_communities,
                level_policy: q.level_policy,
                context_k: q.context_k,
            },
            rerank: RerankConfig {
                weights: "auto".into(),
                alpha: None,
                beta: None,
            },
            query: QueryConfig {
                mode: q.mode,
                synthesis_budget: q.synthesis_budget,
                plan_fallback: q.plan_fallback,
            },
            paths: PathsConfig::default(),
        }
    }
}

/// A partial configuration: nested tables of overrides.
#[derive(Debug, Clone, Default)]
pub struct Layer(pub Table);

impl Layer {
    pub fn set(&mut self, path: &str, value: impl Into<Value>) {
        let mut keys: Vec<&str> = path.split('.').collect();
        let last = keys.pop().expect("non-empty key path");
        let mut t = &mut self.0;
        for k in keys {
            t = t
                .entry(k)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("config path crosses a non-table value");
        }
        t.insert(last.to_string(), value.into());
    }

    pub fn set_opt(&mut self, path: &str, value: Option<impl Into<Value>>) {
        if let Some(v) = value {
            self.set(path, v);
        }
    }

    pub fn set_path(&mut self, key: &str, path: Option<&Path>) {
        if let Some(p) = path {
            self.set(key, absolute(p).display().to_string());
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Overrides taken from `PANKRAG_*` variables.
pub fn env_layer() -> Layer {
    let mut l = Layer::default();
    let var = |k: &str| env::var(k).ok().filter(|v| !v.is_empty());
    l.set_opt("provider.kind", var(ENV_PROVIDER));
    l.set_opt("provider.base_url", var(ENV_BASE_URL));
    l.set_opt("provider.model", var(ENV_MODEL));
    l.set_opt("provider.embed_model", var(ENV_EMBED_MODEL));
    if let Some(dir) = var(ENV_INDEX_DIR) {
        l.set_path("paths.index_dir", Some(Path::new(&dir)));
    }
    l
}

const PATH_KEYS: [(&str, &str); 6] = [
    ("provider", "plan_scripts"),
    ("provider", "templates_dir"),
    ("paths", "corpus_dir"),
    ("paths", "corpus_manifest"),
    ("paths", "index_dir"),
    ("paths", "suite"),
];

/// Parse a config file; relative paths inside it resolve against its directory.
pub fn file_layer(path: &Path) -> Result<Layer> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: Table = raw
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = absolute(path.parent().unwrap_or(Path::new(".")));
    for (section, key) in PATH_KEYS {
        if let Some(Value::String(s)) = table.get_mut(section).and_then(|t| t.get_mut(key)) {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).display().to_string();
            }
        }
    }
    Ok(Layer(table))
}

impl RunConfig {
    /// Defaults overlaid with each layer in turn (later wins).
    pub fn resolve(layers: &[Layer]) -> Result<Self> {
        let Value::Table(mut table) =
            Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?
        else {
            unreachable!("config serializes to a table")
        };
        for l in layers {
            merge(&mut table, &l.0);
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.chunking.validate()?;
        self.weights()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.query_options()?.validate()
    }

    /// Explicit weights, or `None` for per-class defaults.
    pub fn weights(&self) -> Result<Option<RerankWeights>> {
        match (self.rerank.weights.as_str(), self.rerank.alpha, self.rerank.beta) {
            ("auto", None, None) => Ok(None),
            (_, Some(a), Some(b)) => RerankWeights::new(a, b).map(Some),
            (_, Some(a), None) => RerankWeights::new(a, 1.0 - a).map(Some),
            (_, None, Some(b)) => RerankWeights::new(1.0 - b, b).map(Some),
            (other, None, None) => Err(Error::Config(format!(
                "rerank.weights must be \"auto\" or alpha/beta must be set, got {other:?}"
            ))),
        }
    }

    pub fn query_options(&self) -> Result<QueryOptions> {
        Ok(QueryOptions {
            mode: self.query.mode,
            weights: self.weights()?,
            local: LocalParams {
                k_entities: self.retrieval.k_entities,
                k_chunks: self.retrieval.k_chunks,
            },
            k_communities: self.retrieval.k_communities,
            level_policy: self.retrieval.level_policy,
            context_k: self.retrieval.context_k,
            synthesis_budget: self.query.synthesis_budget,
            workers: self.workers,
            plan_fallback: self.query.plan_fallback,
        })
    }

    pub fn index_settings(&self) -> IndexSettings {
        IndexSettings {
            chunking: self.chunking,
            resolution_schedule: self.community.resolution_schedule.clone(),
            leiden_seed: self.community.leiden_seed,
            workers: self.workers,
        }
    }

    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.provider.base_url.clone(),
            api_key: env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            model: self.provider.model.clone(),
            embed_model: self.provider.embed_model.clone(),
            embed_dim: self.provider.embed_dim,
            timeout_secs: self.provider.timeout_secs,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
