//! Answer generation: per-sub-question answers from reranked context, then
//! one synthesis call over resolved answers plus supporting knowledge.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::templates::{ANSWER_SUBQUESTION, ANSWER_WITHOUT_CONTEXT, SYNTHESIZE_ANSWER};
use crate::llm::{parse_json, CompletionRequest, Gateway};
use crate::planner::SubQuestion;
use crate::rerank::RerankWeights;
use crate::retrieval::{by_score_then_id, ScoredChunk};
use crate::text::{count_tokens, normalize_whitespace};

pub const DEFAULT_SYNTHESIS_BUDGET: usize = 8000;
/// Chunks each non-final sub-question contributes to the synthesis knowledge.
pub const PRIOR_KNOWLEDGE_PER_NODE: usize = 2;

pub fn unresolved_marker(id: &str) -> String {
    format!("[unresolved:{id}]")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAnswer {
    pub subq_id: String,
    /// The sub-question as asked, after placeholder substitution.
    pub question: String,
    pub text: String,
    pub cited_chunks: Vec<String>,
    pub weights_used: Option<RerankWeights>,
    #[serde(default)]
    pub failed: bool,
}

impl ResolvedAnswer {
    /// Stand-in for a sub-question whose resolution failed.
    pub fn failed(subq: &SubQuestion, question: &str) -> Self {
        Self {
            subq_id: subq.id.clone(),
            question: question.to_string(),
            text: unresolved_marker(&subq.id),
            cited_chunks: Vec::new(),
            weights_used: None,
            failed: true,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireAnswer {
    answer: String,
    #[serde(default)]
    citations: Vec<String>,
}

fn parse_answer(raw: &str) -> std::result::Result<WireAnswer, String> {
    let w: WireAnswer = parse_json(raw)?;
    if w.answer.trim().is_empty() {
        return Err("answer is empty".into());
    }
    Ok(w)
}

/// One `[id] text` line per passage.
pub fn passage_block(chunks: &[ScoredChunk]) -> String {
    chunks
        .iter()
        .map(|c| format!("[{}] {}", c.chunk_id, normalize_whitespace(&c.text)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn keep_known(citations: Vec<String>, known: &BTreeSet<&str>, what: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    citations
        .into_iter()
        .filter(|c| {
            let ok = known.contains(c.as_str());
            if !ok {
                warn!("{what} cited unknown passage {c}");
            }
            ok && seen.insert(c.clone())
        })
        .collect()
}

/// Answer one (already rephrased) sub-question from its context.
pub fn resolve_subquestion(
    subq: &SubQuestion,
    context: &[ScoredChunk],
    weights: Option<RerankWeights>,
    gateway: &Gateway,
) -> Result<ResolvedAnswer> {
    let req = if context.is_empty() {
        CompletionRequest::new(ANSWER_WITHOUT_CONTEXT).var("question", &subq.text)
    } else {
        CompletionRequest::new(ANSWER_SUBQUESTION)
            .var("question", &subq.text)
            .var("context", passage_block(context))
    }
    .max_output_tokens(400);
    let wire = gateway
        .complete_parsed(&req, parse_answer)
        .map_err(|e| Error::Generation(format!("sub-question {}: {e}", subq.id)))?;
    let known: BTreeSet<&str> = context.iter().map(|c| c.chunk_id.as_str()).collect();
    Ok(ResolvedAnswer {
        subq_id: subq.id.clone(),
        question: subq.text.clone(),
        text: wire.answer.trim().to_string(),
        cited_chunks: keep_known(wire.citations, &known, &subq.id),
        weights_used: weights,
        failed: false,
    })
}

/// Knowledge for synthesis: the final node's context plus the top chunks of
/// every other node, deduplicated and ordered by score.
pub fn assemble_knowledge(final_context: &[ScoredChunk], prior: &[&[ScoredChunk]]) -> Vec<ScoredChunk> {
    let mut all: Vec<ScoredChunk> = final_context.to_vec();
    for ctx in prior {
        all.extend(ctx.iter().take(PRIOR_KNOWLEDGE_PER_NODE).cloned());
    }
    all.sort_by(|a, b| by_score_then_id((a.rank_score(), &a.chunk_id), (b.rank_score(), &b.chunk_id)));
    let mut seen = BTreeSet::new();
    all.retain(|c| seen.insert(c.chunk_id.clone()));
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub text: String,
    pub citations: Vec<String>,
    /// Knowledge ids that made it into the prompt, best first.
    pub knowledge_used: Vec<String>,
    /// Knowledge ids cut to respect the token budget, lowest score first.
    pub knowledge_dropped: Vec<String>,
    pub prompt_tokens: usize,
}

fn resolved_block(resolved: &[ResolvedAnswer]) -> String {
    resolved
        .iter()
        .map(|r| format!("- [{}] {} => {}", r.subq_id, normalize_whitespace(&r.question), r.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One call over the query, resolved answers (in the given order) and
/// knowledge (best first). Knowledge is cut from the bottom until the
/// prompt fits `budget_tokens`; answers are never cut.
pub fn synthesize(
    query: &str,
    resolved: &[ResolvedAnswer],
    knowledge: &[ScoredChunk],
    budget_tokens: usize,
    gateway: &Gateway,
) -> Result<Synthesis> {
    let mut kept: Vec<ScoredChunk> = knowledge.to_vec();
    kept.sort_by(|a, b| by_score_then_id((a.rank_score(), &a.chunk_id), (b.rank_score(), &b.chunk_id)));
    let template = gateway.templates().get(SYNTHESIZE_ANSWER)?;
    let resolved_text = resolved_block(resolved);
    let build = |kept: &[ScoredChunk]| {
        let block = if kept.is_empty() { "(none)".to_string() } else { passage_block(kept) };
        CompletionRequest::new(SYNTHESIZE_ANSWER)
            .var("query", query)
            .var("resolved", if resolved_text.is_empty() { "(none)".into() } else { resolved_text.clone() })
            .var("knowledge", block)
            .max_output_tokens(800)
    };
    let mut dropped = Vec::new();
    let (req, prompt_tokens) = loop {
        let req = build(&kept);
        let tokens = count_tokens(&template.render(&req.variables)?);
        if tokens <= budget_tokens {
            break (req, tokens);
        }
        match kept.pop() {
            Some(c) => dropped.push(c.chunk_id),
            None => {
                return Err(Error::Generation(format!(
                    "synthesis prompt needs {tokens} tokens without any knowledge; budget is {budget_tokens}"
                )))
            }
        }
    };
    let wire = gateway
        .complete_parsed(&req, parse_answer)
        .map_err(|e| Error::Generation(format!("synthesis: {e}")))?;
    let known: BTreeSet<&str> = kept.iter().map(|c| c.chunk_id.as_str()).collect();
    Ok(Synthesis {
        text: wire.answer.trim().to_string(),
        citations: keep_known(wire.citations, &known, "synthesis"),
        knowledge_used: kept.iter().map(|c| c.chunk_id.clone()).collect(),
        knowledge_dropped: dropped,
        prompt_tokens,
    })
}
