//! In-memory index: every artifact the query side needs, and the pipeline
//! that builds it from a corpus.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use crate::community::{build_hierarchy, summarize, CommunityHierarchy, SummaryReport, DEFAULT_SCHEDULE};
use crate::error::{Error, Result};
use crate::graph::{extract_all, merge, Entity, ExtractionFailure, KnowledgeGraph, DESCRIPTION_TOKEN_BUDGET};
use crate::ingest::{segment_all, Chunk, ChunkingConfig, Corpus};
use crate::llm::templates::TEMPLATE_SET_VERSION;
use crate::llm::{EmbeddingProvider, EmbeddingVector, Gateway};

const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    Chunk,
    Entity,
    Community,
}

/// Vectors for chunks, entities and community summaries, all of one
/// dimension and stored at single precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Embeddings {
    pub model: String,
    pub dim: usize,
    pub rows: BTreeMap<(VectorKind, String), EmbeddingVector>,
}

impl Embeddings {
    pub fn new(model: impl Into<String>, dim: usize) -> Self {
        Self {
            model: model.into(),
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, kind: VectorKind, id: &str, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::Config(format!(
                "{kind:?} {id} has dimension {}, index uses {}",
                v.dim(),
                self.dim
            )));
        }
        self.rows.insert((kind, id.to_string()), v.quantized());
        Ok(())
    }

    pub fn get(&self, kind: VectorKind, id: &str) -> Option<&EmbeddingVector> {
        self.rows.get(&(kind, id.to_string()))
    }

    pub fn of_kind(&self, kind: VectorKind) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.rows
            .iter()
            .filter(move |((k, _), _)| *k == kind)
            .map(|((_, id), v)| (id.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSettings {
    pub chunking: ChunkingConfig,
    pub resolution_schedule: Vec<f64>,
    pub leiden_seed: u64,
    pub workers: usize,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self {
            chunking: ChunkingConfig::default(),
            resolution_schedule: DEFAULT_SCHEDULE.to_vec(),
            leiden_seed: 42,
            workers: 4,
        }
    }
}

/// Build metadata carried into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub corpus_hash: String,
    pub documents: usize,
    pub settings: IndexSettings,
    pub llm_provider: String,
    pub template_set_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub meta: IndexMeta,
    pub chunks: BTreeMap<String, Chunk>,
    pub graph: KnowledgeGraph,
    pub hierarchy: CommunityHierarchy,
    pub embeddings: Embeddings,
}

pub fn entity_embedding_text(e: &Entity) -> String {
    if e.description.trim().is_empty() {
        e.display_name.clone()
    } else {
        format!("{}: {}", e.display_name, e.description)
    }
}

impl Index {
    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    /// Referential integrity between tables.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Integrity(m));
        for e in self.graph.entities() {
            if let Some(c) = e.source_chunks.iter().find(|c| !self.chunks.contains_key(*c)) {
                return bad(format!("entity {} cites missing chunk {c}", e.key));
            }
            if self.embeddings.get(VectorKind::Entity, &e.key).is_none() {
                return bad(format!("entity {} has no vector", e.key));
            }
        }
        for r in self.graph.relations() {
            if let Some(c) = r.source_chunks.iter().find(|c| !self.chunks.contains_key(*c)) {
                return bad(format!("relation {}->{} cites missing chunk {c}", r.src, r.dst));
            }
        }
        for id in self.chunks.keys() {
            if self.embeddings.get(VectorKind::Chunk, id).is_none() {
                return bad(format!("chunk {id} has no vector"));
            }
        }
        if !self.hierarchy.levels.is_empty() {
            self.hierarchy.validate(&self.graph)?;
        } else if !self.graph.is_empty() {
            return bad("graph has entities but no communities".into());
        }
        let mut community_ids = BTreeSet::new();
        for c in self.hierarchy.communities() {
            community_ids.insert(c.id.as_str());
            if self.embeddings.get(VectorKind::Community, &c.id).is_none() {
                return bad(format!("community {} has no vector", c.id));
            }
        }
        for ((kind, id), v) in &self.embeddings.rows {
            let known = match kind {
                VectorKind::Chunk => self.chunks.contains_key(id),
                VectorKind::Entity => self.graph.entity(id).is_some(),
                VectorKind::Community => community_ids.contains(id.as_str()),
            };
            if !known {
                return bad(format!("vector for unknown {kind:?} {id}"));
            }
            if v.dim() != self.embeddings.dim {
                return bad(format!("vector for {id} has the wrong dimension"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub chunks: usize,
    pub extraction_failures: Vec<ExtractionFailure>,
    pub condensed_descriptions: usize,
    pub summaries: SummaryReport,
}

fn embed_all(
    embedder: &dyn EmbeddingProvider,
    out: &mut Embeddings,
    kind: VectorKind,
    items: &[(String, String)],
) -> Result<()> {
    for batch in items.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|(_, t)| t.as_str()).collect();
        let vectors = embedder.embed(&texts)?;
        for ((id, _), v) in batch.iter().zip(vectors) {
            out.insert(kind, id, v)?;
        }
    }
    Ok(())
}

/// Chunk, extract, merge, cluster, summarize and embed a corpus.
pub fn build_index(
    corpus: &Corpus,
    settings: &IndexSettings,
    gateway: &Gateway,
    embedder: &dyn EmbeddingProvider,
) -> Result<(Index, BuildReport)> {
    if corpus.documents.is_empty() {
        return Err(Error::Input("no documents".into()));
    }
    settings.chunking.validate()?;
    let mut report = BuildReport::default();

    let chunks = segment_all(&corpus.documents, settings.chunking)?;
    report.chunks = chunks.len();
    info!("segmented {} documents into {} chunks", corpus.documents.len(), chunks.len());

    let (extractions, failures) = extract_all(&chunks, gateway, settings.workers)?;
    report.extraction_failures = failures;
    let mut graph = merge(&extractions);
    report.condensed_descriptions = graph.condense_descriptions(gateway, DESCRIPTION_TOKEN_BUDGET);
    info!("graph has {} entities and {} relations", graph.entity_count(), graph.relation_count());

    let mut hierarchy = CommunityHierarchy::default();
    if !graph.is_empty() {
        hierarchy = build_hierarchy(&graph, &settings.resolution_schedule, settings.leiden_seed)?;
        report.summaries = summarize(&mut hierarchy, &graph, gateway);
        info!(
            "built {} community levels ({} communities)",
            hierarchy.levels.len(),
            hierarchy.communities().count()
        );
    }

    let mut embeddings = Embeddings::new(embedder.name(), embedder.dim());
    let chunk_items: Vec<(String, String)> = chunks.iter().map(|c| (c.id.clone(), c.text.clone())).collect();
    embed_all(embedder, &mut embeddings, VectorKind::Chunk, &chunk_items)?;
    let entity_items: Vec<(String, String)> =
        graph.entities().map(|e| (e.key.clone(), entity_embedding_text(e))).collect();
    embed_all(embedder, &mut embeddings, VectorKind::Entity, &entity_items)?;
    let community_items: Vec<(String, String)> = hierarchy
        .communities()
        .map(|c| (c.id.clone(), c.summary.clone()))
        .collect();
    embed_all(embedder, &mut embeddings, VectorKind::Community, &community_items)?;

    let index = Index {
        meta: IndexMeta {
            corpus_hash: corpus.hash.clone(),
            documents: corpus.documents.len(),
            settings: settings.clone(),
            llm_provider: gateway.provider_name().to_string(),
            template_set_version: TEMPLATE_SET_VERSION,
        },
        chunks: chunks.into_iter().map(|c| (c.id.clone(), c)).collect(),
        graph,
        hierarchy,
        embeddings,
    };
    index.validate()?;
    Ok((index, report))
}
