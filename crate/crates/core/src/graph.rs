//! Knowledge-graph construction: per-chunk extraction and order-independent merge.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Chunk;
use crate::llm::templates::{EXTRACT_ENTITIES, SUMMARIZE_DESCRIPTION};
use crate::llm::{parse_json, CompletionRequest, Gateway};
use crate::text::{count_tokens, normalize_whitespace};

/// Merged descriptions longer than this are condensed by one LLM call.
pub const DESCRIPTION_TOKEN_BUDGET: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub key: String,
    pub display_name: String,
    pub entity_type: String,
    pub description: String,
    pub source_chunks: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub src: String,
    pub dst: String,
    pub label: String,
    pub description: String,
    pub weight: f64,
    pub source_chunks: BTreeSet<String>,
}

pub type RelationKey = (String, String, String);

impl Relation {
    pub fn key(&self) -> RelationKey {
        (self.src.clone(), self.dst.clone(), self.label.clone())
    }
}

/// Case-fold, trim, collapse whitespace and strip one leading article.
pub fn canonical_key(name: &str) -> String {
    let folded = normalize_whitespace(&name.to_lowercase());
    for article in ["the ", "a ", "an "] {
        if let Some(rest) = folded.strip_prefix(article) {
            return rest.to_string();
        }
    }
    folded
}

fn canonical_label(label: &str) -> String {
    normalize_whitespace(&label.to_lowercase())
}

/// What one chunk contributed to the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkExtraction {
    pub chunk_id: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, Deserialize)]
struct WireEntity {
    name: String,
    #[serde(default, rename = "type")]
    entity_type: Option<String>,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Deserialize)]
struct WireRelation {
    source: String,
    target: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Deserialize)]
struct WireExtraction {
    #[serde(default)]
    entities: Vec<WireEntity>,
    #[serde(default)]
    relations: Vec<WireRelation>,
}

fn from_wire(chunk_id: &str, wire: WireExtraction) -> ChunkExtraction {
    let mut entities: BTreeMap<String, Entity> = BTreeMap::new();
    let mut order = Vec::new();
    for e in wire.entities {
        let key = canonical_key(&e.name);
        if key.is_empty() {
            continue;
        }
        let description = normalize_whitespace(&e.description);
        match entities.get_mut(&key) {
            Some(existing) => {
                if !description.is_empty() && !existing.description.contains(&description) {
                    if !existing.description.is_empty() {
                        existing.description.push(' ');
                    }
                    existing.description.push_str(&description);
                }
            }
            None => {
                order.push(key.clone());
                entities.insert(
                    key.clone(),
                    Entity {
                        key,
                        display_name: normalize_whitespace(&e.name),
                        entity_type: e
                            .entity_type
                            .map(|t| t.trim().to_uppercase())
                            .filter(|t| !t.is_empty())
                            .unwrap_or_else(|| "OTHER".into()),
                        description,
                        source_chunks: BTreeSet::from([chunk_id.to_string()]),
                    },
                );
            }
        }
    }
    let mut relations: BTreeMap<RelationKey, Relation> = BTreeMap::new();
    let mut rel_order = Vec::new();
    for r in wire.relations {
        let (src, dst) = (canonical_key(&r.source), canonical_key(&r.target));
        if src == dst || !entities.contains_key(&src) || !entities.contains_key(&dst) {
            continue;
        }
        let label = canonical_label(&r.label);
        let label = if label.is_empty() { "related to".to_string() } else { label };
        let key = (src.clone(), dst.clone(), label.clone());
        if relations.contains_key(&key) {
            continue;
        }
        rel_order.push(key.clone());
        relations.insert(
            key,
            Relation {
                src,
                dst,
                label,
                description: normalize_whitespace(&r.description),
                weight: 1.0,
                source_chunks: BTreeSet::from([chunk_id.to_string()]),
            },
        );
    }
    ChunkExtraction {
        chunk_id: chunk_id.to_string(),
        entities: order.iter().map(|k| entities.remove(k).unwrap()).collect(),
        relations: rel_order.iter().map(|k| relations.remove(k).unwrap()).collect(),
    }
}

/// Ask the model for the entities and relations in one chunk.
pub fn extract(chunk: &Chunk, gateway: &Gateway) -> Result<ChunkExtraction> {
    if chunk.text.trim().is_empty() {
        return Err(Error::Input(format!("chunk {} is empty", chunk.id)));
    }
    let req = CompletionRequest::new(EXTRACT_ENTITIES)
        .var("chunk_id", &chunk.id)
        .var("text", &chunk.text)
        .max_output_tokens(2048);
    let wire: WireExtraction = gateway.complete_parsed(&req, parse_json)?;
    Ok(from_wire(&chunk.id, wire))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionFailure {
    pub chunk_id: String,
    pub error: String,
}

/// Extract every chunk on a pool of `workers` threads. Failed chunks are
/// reported and contribute nothing. Output order follows `chunks`.
pub fn extract_all(
    chunks: &[Chunk],
    gateway: &Gateway,
    workers: usize,
) -> Result<(Vec<ChunkExtraction>, Vec<ExtractionFailure>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<ChunkExtraction>> =
        pool.install(|| chunks.par_iter().map(|c| extract(c, gateway)).collect());
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (chunk, r) in chunks.iter().zip(results) {
        match r {
            Ok(x) => ok.push(x),
            Err(e) => {
                warn!("extraction failed for {}: {e}", chunk.id);
                failed.push(ExtractionFailure {
                    chunk_id: chunk.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<RelationKey, Relation>,
}

/// Distinct descriptions, ordered by the chunk they came from.
fn join_descriptions(mut parts: Vec<(String, String)>) -> String {
    parts.sort();
    let mut seen = BTreeSet::new();
    let mut out: Vec<String> = Vec::new();
    for (_, d) in parts {
        if !d.is_empty() && seen.insert(d.clone()) {
            out.push(d);
        }
    }
    out.join("\n")
}

/// Union per-chunk extractions into one graph. The result does not depend
/// on the order of `per_chunk`.
pub fn merge(per_chunk: &[ChunkExtraction]) -> KnowledgeGraph {
    #[derive(Default)]
    struct EntityAcc {
        names: Vec<(String, String)>,
        types: Vec<(String, String)>,
        descriptions: Vec<(String, String)>,
        chunks: BTreeSet<String>,
    }
    #[derive(Default)]
    struct RelationAcc {
        descriptions: Vec<(String, String)>,
        chunks: BTreeSet<String>,
    }

    let mut ents: BTreeMap<String, EntityAcc> = BTreeMap::new();
    let mut rels: BTreeMap<RelationKey, RelationAcc> = BTreeMap::new();
    for x in per_chunk {
        for e in &x.entities {
            let acc = ents.entry(e.key.clone()).or_default();
            let first = e.source_chunks.iter().next().cloned().unwrap_or_default();
            acc.names.push((first.clone(), e.display_name.clone()));
            for c in &e.source_chunks {
                acc.types.push((c.clone(), e.entity_type.clone()));
                acc.descriptions.push((c.clone(), e.description.clone()));
            }
            acc.chunks.extend(e.source_chunks.iter().cloned());
        }
        for r in &x.relations {
            let acc = rels.entry(r.key()).or_default();
            for c in &r.source_chunks {
                acc.descriptions.push((c.clone(), r.description.clone()));
            }
            acc.chunks.extend(r.source_chunks.iter().cloned());
        }
    }

    let entities: BTreeMap<String, Entity> = ents
        .into_iter()
        .map(|(key, mut acc)| {
            acc.names.sort();
            let display_name = acc.names[0].1.clone();
            let mut type_counts: BTreeMap<String, usize> = BTreeMap::new();
            for (_, t) in &acc.types {
                *type_counts.entry(t.clone()).or_default() += 1;
            }
            let entity_type = type_counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(t, _)| t.clone())
                .unwrap_or_else(|| "OTHER".into());
            let entity = Entity {
                key: key.clone(),
                display_name,
                entity_type,
                description: join_descriptions(acc.descriptions),
                source_chunks: acc.chunks,
            };
            (key, entity)
        })
        .collect();

    let relations = rels
        .into_iter()
        .filter(|((s, d, _), _)| s != d && entities.contains_key(s) && entities.contains_key(d))
        .map(|(key, acc)| {
            let rel = Relation {
                src: key.0.clone(),
                dst: key.1.clone(),
                label: key.2.clone(),
                description: join_descriptions(acc.descriptions),
                weight: acc.chunks.len() as f64,
                source_chunks: acc.chunks,
            };
            (key, rel)
        })
        .collect();

    KnowledgeGraph {
        entities,
        relations,
    }
}

impl KnowledgeGraph {
    /// Build from already-merged records (e.g. loaded from disk), checking
    /// every invariant.
    pub fn from_parts(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<Self> {
        let mut g = KnowledgeGraph::default();
        for e in entities {
            if e.key.is_empty() || e.source_chunks.is_empty() {
                return Err(Error::Integrity(format!("entity {:?} is incomplete", e.key)));
            }
            if g.entities.insert(e.key.clone(), e).is_some() {
                return Err(Error::Integrity("duplicate entity key".into()));
            }
        }
        for r in relations {
            if r.src == r.dst {
                return Err(Error::Integrity(format!("self relation on {}", r.src)));
            }
            if !g.entities.contains_key(&r.src) || !g.entities.contains_key(&r.dst) {
                return Err(Error::Integrity(format!(
                    "relation {} -> {} has a dangling endpoint",
                    r.src, r.dst
                )));
            }
            if g.relations.insert(r.key(), r).is_some() {
                return Err(Error::Integrity("duplicate relation triple".into()));
            }
        }
        Ok(g)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn entity(&self, key: &str) -> Option<&Entity> {
        self.entities.get(key)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Keys of entities sharing at least one relation with `key`, either direction.
    pub fn neighbors(&self, key: &str) -> BTreeSet<&str> {
        self.relations
            .values()
            .filter_map(|r| {
                if r.src == key {
                    Some(r.dst.as_str())
                } else if r.dst == key {
                    Some(r.src.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Split the graph back into one extraction per supporting chunk.
    pub fn resplit(&self) -> Vec<ChunkExtraction> {
        fn slot<'a>(
            per: &'a mut BTreeMap<String, ChunkExtraction>,
            chunk_id: &str,
        ) -> &'a mut ChunkExtraction {
            per.entry(chunk_id.to_string())
                .or_insert_with(|| ChunkExtraction {
                    chunk_id: chunk_id.to_string(),
                    entities: Vec::new(),
                    relations: Vec::new(),
                })
        }
        let mut per: BTreeMap<String, ChunkExtraction> = BTreeMap::new();
        for e in self.entities.values() {
            for c in &e.source_chunks {
                slot(&mut per, c).entities.push(Entity {
                    source_chunks: BTreeSet::from([c.clone()]),
                    ..e.clone()
                });
            }
        }
        for r in self.relations.values() {
            for c in &r.source_chunks {
                slot(&mut per, c).relations.push(Relation {
                    source_chunks: BTreeSet::from([c.clone()]),
                    weight: 1.0,
                    ..r.clone()
                });
            }
        }
        per.into_values().collect()
    }

    /// Condense over-budget descriptions with the summarization template.
    /// Falls back to truncation when the call fails; returns how many
    /// descriptions were condensed.
    pub fn condense_descriptions(&mut self, gateway: &Gateway, budget: usize) -> usize {
        let condense = |name: &str, text: &str| -> String {
            let req = CompletionRequest::new(SUMMARIZE_DESCRIPTION)
                .var("name", name)
                .var("description", text);
            match gateway.complete(&req) {
                Ok(s) if !s.trim().is_empty() && count_tokens(&s) <= budget => s.trim().to_string(),
                Ok(_) | Err(_) => truncate_tokens(text, budget),
            }
        };
        let mut n = 0;
        for e in self.entities.values_mut() {
            if count_tokens(&e.description) > budget {
                e.description = condense(&e.display_name, &e.description);
                n += 1;
            }
        }
        for r in self.relations.values_mut() {
            if count_tokens(&r.description) > budget {
                let name = format!("{} {} {}", r.src, r.label, r.dst);
                r.description = condense(&name, &r.description);
                n += 1;
            }
        }
        n
    }

    /// Stable serialized form: one JSON record per entity, then per relation.
    pub fn to_records(&self) -> Vec<serde_json::Value> {
        let mut out: Vec<serde_json::Value> = self
            .entities
            .values()
            .map(|e| {
                let mut v = serde_json::to_value(e).unwrap();
                v["record"] = "entity".into();
                v
            })
            .collect();
        out.extend(self.relations.values().map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v["record"] = "relation".into();
            v
        }));
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.to_records()
            .iter()
            .map(|v| v.to_string() + "\n")
            .collect()
    }
}

pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let spans = crate::text::token_spans(text);
    if spans.len() <= max_tokens {
        return text.to_string();
    }
    text[..spans[max_tokens - 1].end].to_string()
}
