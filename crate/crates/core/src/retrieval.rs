//! Query classification and candidate retrieval: entity-centric local search
//! for specific questions, community-summary search for abstract ones.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{canonical_key, KnowledgeGraph};
use crate::index::{Index, VectorKind};
use crate::llm::templates::CLASSIFY_QUERY;
use crate::llm::{parse_json, CompletionRequest, EmbeddingVector, Gateway};
use crate::text::words;

pub const DEFAULT_K_ENTITIES: usize = 5;
pub const DEFAULT_K_CHUNKS: usize = 12;
pub const DEFAULT_K_COMMUNITIES: usize = 8;
/// Entities below this cosine with the question never seed a local search.
pub const SEED_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryType {
    #[serde(rename = "SCQ")]
    Scq,
    #[serde(rename = "ACQ")]
    Acq,
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryType::Scq => "SCQ",
            QueryType::Acq => "ACQ",
        })
    }
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SCQ" => Ok(QueryType::Scq),
            "ACQ" => Ok(QueryType::Acq),
            other => Err(Error::Input(format!("unknown query class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryClass {
    pub value: QueryType,
    pub rationale: String,
    /// True when the heuristic decided because the model's answer was unusable.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Deserialize)]
struct WireClass {
    class: String,
    #[serde(default)]
    rationale: String,
}

/// SCQ when the question names an entity the graph knows, else ACQ.
pub fn heuristic_class(question: &str, graph: &KnowledgeGraph) -> QueryClass {
    let padded = format!(" {} ", words(question).join(" "));
    let hit = graph.entities().find(|e| {
        let key = words(&canonical_key(&e.display_name)).join(" ");
        !key.is_empty() && padded.contains(&format!(" {key} "))
    });
    match hit {
        Some(e) => QueryClass {
            value: QueryType::Scq,
            rationale: format!("names known entity {}", e.display_name),
            fallback: true,
        },
        None => QueryClass {
            value: QueryType::Acq,
            rationale: "names no known entity".into(),
            fallback: true,
        },
    }
}

pub fn classify(question: &str, gateway: &Gateway, graph: &KnowledgeGraph) -> Result<QueryClass> {
    if question.trim().is_empty() {
        return Err(Error::Input("question is empty".into()));
    }
    let req = CompletionRequest::new(CLASSIFY_QUERY)
        .var("question", question.trim())
        .max_output_tokens(200);
    let parsed = gateway.complete_parsed(&req, |raw| {
        let w: WireClass = parse_json(raw)?;
        let value = w.class.parse::<QueryType>().map_err(|e| e.to_string())?;
        Ok(QueryClass {
            value,
            rationale: w.rationale,
            fallback: false,
        })
    });
    Ok(match parsed {
        Ok(c) => c,
        Err(e) => {
            warn!("classifier failed ({e}); using the heuristic");
            heuristic_class(question, graph)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Local,
    CommunitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    /// Chunk id, or community id for summaries.
    pub chunk_id: String,
    pub text: String,
    pub origin: Origin,
    pub intrinsic_score: f64,
    pub similarity_score: Option<f64>,
    pub combined_score: Option<f64>,
}

impl ScoredChunk {
    /// Combined score when reranked, intrinsic score otherwise.
    pub fn rank_score(&self) -> f64 {
        self.combined_score.unwrap_or(self.intrinsic_score)
    }
}

/// Descending by score, ties by id.
pub fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Min-max normalize into [0, 1]; a constant input maps to 0.5 everywhere.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let Some(min) = raw.iter().copied().reduce(f64::min) else {
        return Vec::new();
    };
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= f64::EPSILON {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|r| ((r - min) / (max - min)).clamp(0.0, 1.0)).collect()
}

fn score_and_rank(items: Vec<(String, String, f64)>, origin: Origin, k: usize) -> Vec<ScoredChunk> {
    let raw: Vec<f64> = items.iter().map(|(_, _, s)| *s).collect();
    let norm = normalize_scores(&raw);
    let mut out: Vec<(ScoredChunk, f64)> = items
        .into_iter()
        .zip(norm)
        .map(|((id, text, raw), r)| {
            (
                ScoredChunk {
                    chunk_id: id,
                    text,
                    origin,
                    intrinsic_score: r,
                    similarity_score: None,
                    combined_score: None,
                },
                raw,
            )
        })
        .collect();
    out.sort_by(|(a, ra), (b, rb)| {
        by_score_then_id((a.intrinsic_score, &a.chunk_id), (b.intrinsic_score, &b.chunk_id))
            .then_with(|| rb.total_cmp(ra))
    });
    out.truncate(k);
    out.into_iter().map(|(c, _)| c).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalParams {
    pub k_entities: usize,
    pub k_chunks: usize,
}

impl Default for LocalParams {
    fn default() -> Self {
        Self {
            k_entities: DEFAULT_K_ENTITIES,
            k_chunks: DEFAULT_K_CHUNKS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalResult {
    /// (entity key, cosine) for each seed.
    pub seeds: Vec<(String, f64)>,
    pub candidates: usize,
    pub chunks: Vec<ScoredChunk>,
}

/// Seed entities by description similarity, expand one hop, and rank the
/// source chunks of seeds and neighbors by similarity to the question.
pub fn local_search(index: &Index, question: &EmbeddingVector, params: LocalParams) -> Result<LocalResult> {
    if params.k_entities == 0 || params.k_chunks == 0 {
        return Err(Error::Config("k_entities and k_chunks must be at least 1".into()));
    }
    if index.graph.is_empty() {
        warn!("local search over an empty graph");
        return Ok(LocalResult::default());
    }
    let mut seeds: Vec<(String, f64)> = index
        .embeddings
        .of_kind(VectorKind::Entity)
        .map(|(key, v)| (key.to_string(), question.cosine(v)))
        .filter(|(_, s)| *s >= SEED_FLOOR)
        .collect();
    seeds.sort_by(|a, b| by_score_then_id((a.1, &a.0), (b.1, &b.0)));
    seeds.truncate(params.k_entities);

    let mut entities: BTreeSet<&str> = BTreeSet::new();
    for (key, _) in &seeds {
        entities.insert(key);
        entities.extend(index.graph.neighbors(key));
    }
    let candidate_ids: BTreeSet<&String> = entities
        .iter()
        .filter_map(|k| index.graph.entity(k))
        .flat_map(|e| e.source_chunks.iter())
        .collect();
    let items: Vec<(String, String, f64)> = candidate_ids
        .iter()
        .map(|id| {
            let chunk = index
                .chunk(id)
                .ok_or_else(|| Error::Retrieval(format!("entity source chunk {id} is missing")))?;
            let v = index
                .embeddings
                .get(VectorKind::Chunk, id)
                .ok_or_else(|| Error::Retrieval(format!("chunk {id} has no vector")))?;
            Ok((chunk.id.clone(), chunk.text.clone(), question.cosine(v)))
        })
        .collect::<Result<_>>()?;
    let candidates = items.len();
    Ok(LocalResult {
        seeds,
        candidates,
        chunks: score_and_rank(items, Origin::Local, params.k_chunks),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelPolicy {
    #[default]
    Auto,
    Leaf,
    Top,
}

impl FromStr for LevelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LevelPolicy::Auto),
            "leaf" => Ok(LevelPolicy::Leaf),
            "top" => Ok(LevelPolicy::Top),
            other => Err(Error::Config(format!("unknown level policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalResult {
    pub level: usize,
    /// Best summary cosine at each level.
    pub level_best: Vec<f64>,
    pub chunks: Vec<ScoredChunk>,
}

/// Rank community summaries of one hierarchy level against the question.
pub fn global_search(index: &Index, question: &EmbeddingVector, policy: LevelPolicy, k: usize) -> Result<GlobalResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let h = &index.hierarchy;
    if h.levels.is_empty() || h.communities().any(|c| c.summary.trim().is_empty()) {
        return Err(Error::Config("community hierarchy is not summarized".into()));
    }
    let scored: Vec<Vec<(String, String, f64)>> = h
        .levels
        .iter()
        .map(|level| {
            level
                .iter()
                .map(|c| {
                    let v = index
                        .embeddings
                        .get(VectorKind::Community, &c.id)
                        .ok_or_else(|| Error::Retrieval(format!("community {} has no vector", c.id)))?;
                    Ok((c.id.clone(), c.summary.clone(), question.cosine(v)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let level_best: Vec<f64> = scored
        .iter()
        .map(|l| l.iter().map(|(_, _, s)| *s).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let level = match policy {
        LevelPolicy::Leaf => 0,
        LevelPolicy::Top => h.max_level(),
        LevelPolicy::Auto => {
            let mut best = 0;
            for (i, s) in level_best.iter().enumerate() {
                if *s > level_best[best] {
                    best = i;
                }
            }
            best
        }
    };
    let items = scored.into_iter().nth(level).unwrap_or_default();
    Ok(GlobalResult {
        level,
        level_best,
        chunks: score_and_rank(items, Origin::CommunitySummary, k),
    })
}

/// Plain top-k over every chunk, bypassing the graph.
pub fn naive_search(index: &Index, question: &EmbeddingVector, k: usize) -> Result<Vec<ScoredChunk>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let items: Vec<(String, String, f64)> = index
        .chunks
        .values()
        .map(|c| {
            let v = index
                .embeddings
                .get(VectorKind::Chunk, &c.id)
                .ok_or_else(|| Error::Retrieval(format!("chunk {} has no vector", c.id)))?;
            Ok((c.id.clone(), c.text.clone(), question.cosine(v)))
        })
        .collect::<Result<_>>()?;
    Ok(score_and_rank(items, Origin::Local, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_scores(&[0.25, 0.75, 0.5]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_scores(&[0.3, 0.3]), vec![0.5, 0.5]);
        assert!(normalize_scores(&[]).is_empty());
    }

    #[test]
    fn class_parsing() {
        assert_eq!("scq".parse::<QueryType>().unwrap(), QueryType::Scq);
        assert!("XCQ".parse::<QueryType>().is_err());
        assert_eq!(serde_json::to_string(&QueryType::Acq).unwrap(), "\"ACQ\"");
    }
}
