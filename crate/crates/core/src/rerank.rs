//! Dependency-aware reranking: blend each chunk's retrieval score with its
//! similarity to the answers of the sub-questions it depends on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{EmbeddingProvider, EmbeddingVector};
use crate::retrieval::{by_score_then_id, QueryType, ScoredChunk};

/// Chunks whose mapped similarity is below this are treated as contradicting
/// the resolved answers.
pub const INCONGRUENCE_FLOOR: f64 = 0.05;
/// The floor only applies while at least this many chunks survive it.
pub const MIN_SURVIVORS: usize = 3;
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct RerankWeights {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawWeights> for RerankWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        Self::new(r.alpha, r.beta)
    }
}

impl RerankWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let in_unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !in_unit(alpha) || !in_unit(beta) {
            return Err(Error::Config(format!("weights ({alpha}, {beta}) must lie in [0, 1]")));
        }
        if (alpha + beta - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Config(format!(
                "alpha + beta must equal 1, got {alpha} + {beta} = {}",
                alpha + beta
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Weights that ignore dependency similarity entirely.
    pub fn intrinsic_only() -> Self {
        Self { alpha: 1.0, beta: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn combine(&self, intrinsic: f64, similarity: f64) -> f64 {
        self.alpha * intrinsic + self.beta * similarity
    }
}

pub fn default_weights(class: QueryType) -> RerankWeights {
    match class {
        QueryType::Scq => RerankWeights { alpha: 0.6, beta: 0.4 },
        QueryType::Acq => RerankWeights { alpha: 0.75, beta: 0.25 },
    }
}

/// Map a cosine from [-1, 1] onto [0, 1].
pub fn map_cosine(c: f64) -> f64 {
    ((c + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Highest mapped cosine between a chunk and any resolved answer.
pub fn similarity(chunk: &EmbeddingVector, answers: &[EmbeddingVector]) -> Result<f64> {
    answers
        .iter()
        .map(|a| chunk.cosine(a))
        .reduce(f64::max)
        .map(map_cosine)
        .ok_or_else(|| Error::Input("similarity needs at least one resolved answer".into()))
}

/// Sort by combined score and drop incongruent chunks, given each chunk's
/// dependency similarity. With no answers the input comes back untouched.
pub fn rerank_with_similarity(
    chunks: &[ScoredChunk],
    similarities: Option<&[f64]>,
    weights: RerankWeights,
) -> Vec<ScoredChunk> {
    let Some(sims) = similarities else {
        return chunks.to_vec();
    };
    assert_eq!(sims.len(), chunks.len(), "one similarity per chunk");
    let mut out: Vec<ScoredChunk> = chunks
        .iter()
        .zip(sims)
        .map(|(c, &m)| ScoredChunk {
            similarity_score: Some(m),
            combined_score: Some(weights.combine(c.intrinsic_score, m)),
            ..c.clone()
        })
        .collect();
    out.sort_by(|a, b| by_score_then_id((a.rank_score(), &a.chunk_id), (b.rank_score(), &b.chunk_id)));
    if weights.beta() > 0.0 {
        let congruent = |c: &ScoredChunk| c.similarity_score.unwrap_or(1.0) >= INCONGRUENCE_FLOOR;
        if out.iter().filter(|c| congruent(c)).count() >= MIN_SURVIVORS {
            out.retain(congruent);
        }
    }
    out
}

/// Rerank `chunks` against the embedded answers of their dependencies.
/// `vector_of` supplies each chunk's embedding.
pub fn rerank(
    chunks: &[ScoredChunk],
    answers: &[EmbeddingVector],
    weights: RerankWeights,
    vector_of: impl Fn(&ScoredChunk) -> Result<EmbeddingVector>,
) -> Result<Vec<ScoredChunk>> {
    if answers.is_empty() {
        return Ok(chunks.to_vec());
    }
    let sims: Vec<f64> = chunks
        .iter()
        .map(|c| similarity(&vector_of(c)?, answers))
        .collect::<Result<_>>()?;
    Ok(rerank_with_similarity(chunks, Some(&sims), weights))
}

/// Convenience form that embeds chunk and answer texts directly.
pub fn rerank_texts(
    chunks: &[ScoredChunk],
    answers: &[&str],
    weights: RerankWeights,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredChunk>> {
    if answers.is_empty() {
        return Ok(chunks.to_vec());
    }
    if answers.iter().any(|a| a.trim().is_empty()) {
        return Err(Error::Input("resolved answer is empty".into()));
    }
    let answer_vecs = embedder.embed(answers)?;
    rerank(chunks, &answer_vecs, weights, |c| embedder.embed_one(&c.text))
}
