//! Query execution: plan, schedule, resolve each wave of sub-questions
//! concurrently, then synthesize.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{
    assemble_knowledge, resolve_subquestion, synthesize, ResolvedAnswer, Synthesis, DEFAULT_SYNTHESIS_BUDGET,
};
use crate::index::{Index, VectorKind};
use crate::llm::{CallLog, CallRecord, EmbeddingProvider, EmbeddingVector, Gateway};
use crate::planner::{plan, rephrase_with_context, topo_schedule, PlanDag, Schedule, SubQuestion};
use crate::rerank::{default_weights, rerank, RerankWeights};
use crate::retrieval::{
    classify, global_search, local_search, naive_search, LevelPolicy, LocalParams, Origin, QueryClass, QueryType,
    ScoredChunk, DEFAULT_K_COMMUNITIES,
};

pub const DEFAULT_CONTEXT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    NoPlan,
    NoRerank,
    Naive,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoPlan, Mode::NoRerank, Mode::Naive];

    fn plans(self) -> bool {
        matches!(self, Mode::Full | Mode::NoRerank)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoPlan => "no_plan",
            Mode::NoRerank => "no_rerank",
            Mode::Naive => "naive",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (full, no_plan, no_rerank, naive)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryOptions {
    pub mode: Mode,
    /// Fixed weights; `None` picks per-class defaults.
    pub weights: Option<RerankWeights>,
    pub local: LocalParams,
    pub k_communities: usize,
    pub level_policy: LevelPolicy,
    /// Passages each sub-question keeps after reranking.
    pub context_k: usize,
    pub synthesis_budget: usize,
    pub workers: usize,
    /// Run the query unplanned when planning fails instead of erroring.
    pub plan_fallback: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            weights: None,
            local: LocalParams::default(),
            k_communities: DEFAULT_K_COMMUNITIES,
            level_policy: LevelPolicy::Auto,
            context_k: DEFAULT_CONTEXT_K,
            synthesis_budget: DEFAULT_SYNTHESIS_BUDGET,
            workers: 4,
            plan_fallback: true,
        }
    }
}

impl QueryOptions {
    pub fn validate(&self) -> Result<()> {
        if self.context_k == 0 || self.k_communities == 0 || self.local.k_chunks == 0 || self.local.k_entities == 0 {
            return Err(Error::Config("retrieval sizes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalKind {
    Local,
    Global,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub id: String,
    pub question: String,
    pub class: Option<QueryClass>,
    pub retrieval: RetrievalKind,
    pub seeds: Vec<(String, f64)>,
    pub candidates: usize,
    pub level: Option<usize>,
    pub retrieved: Vec<ScoredChunk>,
    pub reranked: Vec<ScoredChunk>,
    /// Ids kept as this node's context, in rank order.
    pub context: Vec<String>,
    pub dependency_answers: Vec<String>,
    pub weights: Option<RerankWeights>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub options: QueryOptions,
    /// Caller-supplied configuration recorded for replay.
    pub run_config: Option<serde_json::Value>,
    pub plan: PlanDag,
    pub plan_error: Option<String>,
    pub schedule: Schedule,
    pub nodes: Vec<NodeTrace>,
    pub synthesis: Synthesis,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub query: String,
    pub text: String,
    pub citations: Vec<String>,
    /// One entry per plan node, in schedule order.
    pub per_subq: Vec<ResolvedAnswer>,
    pub degraded: bool,
    pub trace: Trace,
}

impl FinalAnswer {
    /// Chunk ids handed to synthesis, best first (community summaries excluded).
    pub fn retrieved_chunks(&self) -> Vec<String> {
        let local: BTreeSet<&str> = self
            .trace
            .nodes
            .iter()
            .flat_map(|n| &n.reranked)
            .filter(|c| c.origin == Origin::Local)
            .map(|c| c.chunk_id.as_str())
            .collect();
        self.trace
            .synthesis
            .knowledge_used
            .iter()
            .filter(|id| local.contains(id.as_str()))
            .cloned()
            .collect()
    }
}

struct NodeOutcome {
    answer: ResolvedAnswer,
    trace: NodeTrace,
    context: Vec<ScoredChunk>,
}

pub struct Engine<'a> {
    index: &'a Index,
    gateway: Gateway,
    embedder: &'a dyn EmbeddingProvider,
}

impl<'a> Engine<'a> {
    pub fn new(index: &'a Index, gateway: Gateway, embedder: &'a dyn EmbeddingProvider) -> Result<Self> {
        if embedder.dim() != index.embeddings.dim {
            return Err(Error::Config(format!(
                "embedding provider {} has dimension {}, the index was built with {}",
                embedder.name(),
                embedder.dim(),
                index.embeddings.dim
            )));
        }
        if embedder.name() != index.embeddings.model {
            warn!(
                "index was embedded with {}, querying with {}",
                index.embeddings.model,
                embedder.name()
            );
        }
        Ok(Self {
            index,
            gateway,
            embedder,
        })
    }

    pub fn index(&self) -> &Index {
        self.index
    }

    fn vector_of(&self, c: &ScoredChunk) -> Result<EmbeddingVector> {
        let kind = match c.origin {
            Origin::Local => VectorKind::Chunk,
            Origin::CommunitySummary => VectorKind::Community,
        };
        match self.index.embeddings.get(kind, &c.chunk_id) {
            Some(v) => Ok(v.clone()),
            None => self.embedder.embed_one(&c.text),
        }
    }

    fn resolve_node(
        &self,
        gw: &Gateway,
        subq: &SubQuestion,
        answers: &BTreeMap<String, ResolvedAnswer>,
        opts: &QueryOptions,
    ) -> Result<NodeOutcome> {
        let texts: BTreeMap<String, String> = subq
            .depends_on
            .iter()
            .map(|d| (d.clone(), answers[d].text.clone()))
            .collect();
        let asked = rephrase_with_context(subq, &texts)?;
        let dependency_answers: Vec<String> = subq
            .depends_on
            .iter()
            .filter(|d| !answers[*d].failed)
            .map(|d| answers[d].text.clone())
            .collect();
        let qvec = self.embedder.embed_one(&asked.text)?;

        let mut trace = NodeTrace {
            id: subq.id.clone(),
            question: asked.text.clone(),
            class: None,
            retrieval: RetrievalKind::Naive,
            seeds: Vec::new(),
            candidates: 0,
            level: None,
            retrieved: Vec::new(),
            reranked: Vec::new(),
            context: Vec::new(),
            dependency_answers: dependency_answers.clone(),
            weights: None,
            error: None,
        };

        let (retrieved, weights) = if opts.mode == Mode::Naive {
            let chunks = naive_search(self.index, &qvec, opts.local.k_chunks)?;
            trace.candidates = self.index.chunks.len();
            (chunks, None)
        } else {
            let class = classify(&asked.text, gw, &self.index.graph)?;
            let mut chunks = Vec::new();
            if class.value == QueryType::Scq {
                let local = local_search(self.index, &qvec, opts.local)?;
                trace.retrieval = RetrievalKind::Local;
                trace.seeds = local.seeds;
                trace.candidates = local.candidates;
                chunks = local.chunks;
            }
            if chunks.is_empty() && !self.index.hierarchy.levels.is_empty() {
                let global = global_search(self.index, &qvec, opts.level_policy, opts.k_communities)?;
                trace.retrieval = RetrievalKind::Global;
                trace.level = Some(global.level);
                trace.candidates = global.chunks.len();
                chunks = global.chunks;
            }
            let weights = match (opts.mode, opts.weights) {
                (Mode::NoRerank, _) => RerankWeights::intrinsic_only(),
                (_, Some(w)) => w,
                (_, None) => default_weights(class.value),
            };
            trace.class = Some(class);
            (chunks, Some(weights))
        };
        trace.retrieved = retrieved.clone();

        let reranked = match weights {
            Some(w) if !dependency_answers.is_empty() => {
                let refs: Vec<&str> = dependency_answers.iter().map(String::as_str).collect();
                let answer_vecs = self.embedder.embed(&refs)?;
                rerank(&retrieved, &answer_vecs, w, |c| self.vector_of(c))?
            }
            _ => retrieved,
        };
        trace.weights = weights;
        let context: Vec<ScoredChunk> = reranked.iter().take(opts.context_k).cloned().collect();
        trace.reranked = reranked;
        trace.context = context.iter().map(|c| c.chunk_id.clone()).collect();

        let answer = match resolve_subquestion(&asked, &context, weights, gw) {
            Ok(a) => a,
            Err(e) => {
                warn!("{} failed: {e}", subq.id);
                trace.error = Some(e.to_string());
                ResolvedAnswer::failed(subq, &asked.text)
            }
        };
        Ok(NodeOutcome { answer, trace, context })
    }

    /// The plan a query would run under `mode`, plus the planning error if
    /// it fell back.
    pub fn plan_for(&self, gw: &Gateway, question: &str, opts: &QueryOptions) -> Result<(PlanDag, Option<String>)> {
        if !opts.mode.plans() {
            return Ok((PlanDag::single(question), None));
        }
        match plan(question, gw) {
            Ok(p) => Ok((p, None)),
            Err(e @ (Error::Planning(_) | Error::Transport(_))) if opts.plan_fallback => {
                warn!("planning failed, answering unplanned: {e}");
                Ok((PlanDag::single(question), Some(e.to_string())))
            }
            Err(e) => Err(e),
        }
    }

    pub fn query(&self, question: &str, opts: &QueryOptions) -> Result<FinalAnswer> {
        let question = question.trim();
        if question.is_empty() {
            return Err(Error::Input("question is empty".into()));
        }
        opts.validate()?;
        let log: CallLog = Arc::new(Mutex::new(Vec::new()));
        let gw = self.gateway.recording(log.clone());

        let (dag, plan_error) = self.plan_for(&gw, question, opts)?;
        let schedule = topo_schedule(&dag)?;
        info!("plan has {} sub-questions in {} waves", dag.nodes.len(), schedule.len());

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let mut answers: BTreeMap<String, ResolvedAnswer> = BTreeMap::new();
        let mut contexts: BTreeMap<String, Vec<ScoredChunk>> = BTreeMap::new();
        let mut nodes = Vec::new();
        for wave in &schedule.waves {
            let outcomes: Vec<Result<NodeOutcome>> = pool.install(|| {
                wave.par_iter()
                    .map(|id| self.resolve_node(&gw, &dag.nodes[id], &answers, opts))
                    .collect()
            });
            for (id, outcome) in wave.iter().zip(outcomes) {
                let o = outcome?;
                answers.insert(id.clone(), o.answer);
                contexts.insert(id.clone(), o.context);
                nodes.push(o.trace);
            }
        }

        let order: Vec<&String> = schedule.waves.iter().flatten().collect();
        let per_subq: Vec<ResolvedAnswer> = order.iter().map(|id| answers[*id].clone()).collect();
        let prior: Vec<&[ScoredChunk]> = order
            .iter()
            .filter(|id| ***id != dag.final_node)
            .map(|id| contexts[*id].as_slice())
            .collect();
        let knowledge = assemble_knowledge(&contexts[&dag.final_node], &prior);
        let synthesis = synthesize(question, &per_subq, &knowledge, opts.synthesis_budget, &gw)?;

        let mut citations: Vec<String> = Vec::new();
        for id in per_subq.iter().flat_map(|a| &a.cited_chunks).chain(&synthesis.citations) {
            if !citations.contains(id) {
                citations.push(id.clone());
            }
        }
        let degraded = plan_error.is_some() || per_subq.iter().any(|a| a.failed);
        let mut calls = log.lock().unwrap().clone();
        calls.sort_by(|a, b| (&a.template_id, &a.request_hash).cmp(&(&b.template_id, &b.request_hash)));
        Ok(FinalAnswer {
            query: question.to_string(),
            text: synthesis.text.clone(),
            citations,
            per_subq,
            degraded,
            trace: Trace {
                options: opts.clone(),
                run_config: None,
                plan: dag,
                plan_error,
                schedule,
                nodes,
                synthesis,
                calls,
            },
        })
    }
}
