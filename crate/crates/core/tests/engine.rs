mod common;

use std::sync::Arc;

use pankrag::community::CommunityHierarchy;
use pankrag::engine::{Engine, Mode, QueryOptions, RetrievalKind};
use pankrag::generate::{resolve_subquestion, synthesize, ResolvedAnswer};
use pankrag::index::VectorKind;
use pankrag::llm::mock::MockLlm;
use pankrag::llm::{
    CompletionProvider, CompletionRequest, EmbeddingProvider, Gateway, MockEmbedder, ProviderError, RetryPolicy,
    TemplateRegistry,
};
use pankrag::planner::{PlanDag, SubQuestion};
use pankrag::rerank::RerankWeights;
use pankrag::retrieval::{
    classify, global_search, local_search, naive_search, normalize_scores, LevelPolicy, LocalParams, Origin,
    QueryType, ScoredChunk, SEED_FLOOR,
};
use pankrag::Error;

const HOP1: &str = "marta_quill_profile.txt#0";
const HOP2: &str = "borealis_headquarters.txt#0";

struct Down;

impl CompletionProvider for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn complete(&self, _: &CompletionRequest, _: &str) -> Result<String, ProviderError> {
        Err(ProviderError::Fatal("down".into()))
    }
}

fn down() -> Gateway {
    Gateway::new(Arc::new(Down), TemplateRegistry::builtin()).with_retry(RetryPolicy::immediate(1))
}

fn opts(mode: Mode) -> QueryOptions {
    QueryOptions { mode, ..Default::default() }
}

#[test]
fn two_hop_question_cites_both_hops() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let ans = engine.query(common::TWO_HOP_QUESTION, &opts(Mode::Full)).unwrap();
    assert_eq!(ans.text, "Tallinn");
    assert!(!ans.degraded);
    assert!(ans.citations.contains(&HOP1.to_string()), "{:?}", ans.citations);
    assert!(ans.citations.contains(&HOP2.to_string()), "{:?}", ans.citations);
    let ids: Vec<&str> = ans.per_subq.iter().map(|a| a.subq_id.as_str()).collect();
    assert_eq!(ids, ["S1.1", "S1.2"]);
    assert_eq!(ans.per_subq[0].text, "Borealis Dynamics");
    assert_eq!(ans.per_subq[1].question, "Where is Borealis Dynamics headquartered?");
    let s12 = &ans.trace.nodes[1];
    assert_eq!(s12.dependency_answers, ["Borealis Dynamics"]);
    assert_eq!(s12.weights, Some(RerankWeights::new(0.6, 0.4).unwrap()));
    assert!(s12.reranked.iter().all(|c| c.combined_score.is_some()));
    assert!(ans.trace.nodes[0].reranked.iter().all(|c| c.combined_score.is_none()));
    for c in &ans.citations {
        assert!(index.chunk(c).is_some());
    }
    let mut sorted = ans.trace.calls.clone();
    sorted.sort_by(|a, b| (&a.template_id, &a.request_hash).cmp(&(&b.template_id, &b.request_hash)));
    assert_eq!(sorted, ans.trace.calls);
}

#[test]
fn without_the_plan_hop_two_is_missed() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let ans = engine.query(common::TWO_HOP_QUESTION, &opts(Mode::NoPlan)).unwrap();
    assert_eq!(ans.per_subq.len(), 1);
    assert!(!ans.citations.contains(&HOP2.to_string()));
    assert!(!ans.retrieved_chunks().contains(&HOP2.to_string()));
    assert!(ans.retrieved_chunks().contains(&HOP1.to_string()));
}

#[test]
fn queries_are_deterministic() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    for mode in Mode::ALL {
        let a = engine.query(common::RERANK_QUESTION, &opts(mode)).unwrap();
        let b = engine.query(common::RERANK_QUESTION, &opts(mode)).unwrap();
        assert_eq!(a, b, "{mode}");
    }
}

#[test]
fn rerank_pulls_the_award_chunk_into_context() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let award = "cobalt_sprout_award.txt#0".to_string();
    let full = engine.query(common::RERANK_QUESTION, &opts(Mode::Full)).unwrap();
    let flat = engine.query(common::RERANK_QUESTION, &opts(Mode::NoRerank)).unwrap();
    assert!(full.trace.nodes[1].context.contains(&award));
    assert!(!flat.trace.nodes[1].context.contains(&award));
    assert!(flat.trace.nodes[1].retrieved.iter().any(|c| c.chunk_id == award));
}

#[test]
fn five_node_plan_resolves_in_wave_order() {
    let index = common::fixture_index();
    let q = "Which was founded first, the company Marta Quill started or the startup Lena Ortiz launched?";
    let transcript = r#"{"ambiguous": true,
 "nodes": [
   {"id": "S0.1", "text": "What does 'the startup Lena Ortiz launched' refer to?", "kind": "disambiguation"},
   {"id": "S1.1", "text": "Which company was founded by Marta Quill?", "kind": "standard"},
   {"id": "S1.2", "text": "When was [A1.1] founded?", "kind": "standard"},
   {"id": "S2.1", "text": "When was [A0.1] launched?", "kind": "standard"},
   {"id": "S3.1", "text": "Which is earlier, [A1.2] or [A2.1]?", "kind": "standard"}
 ],
 "edges": [["S0.1", "S1.1"], ["S0.1", "S2.1"], ["S1.1", "S1.2"], ["S1.2", "S3.1"], ["S2.1", "S3.1"]],
 "final": "S3.1"}"#;
    let gw = Gateway::mock(MockLlm::new().with_plan(q, transcript));
    let engine = Engine::new(&index, gw, &MockEmbedder).unwrap();
    let ans = engine.query(q, &opts(Mode::Full)).unwrap();
    let ids: Vec<&str> = ans.per_subq.iter().map(|a| a.subq_id.as_str()).collect();
    assert_eq!(ids, ["S0.1", "S1.1", "S2.1", "S1.2", "S3.1"]);
    assert_eq!(ans.trace.schedule.len(), 4);
    let s12 = ans.per_subq.iter().find(|a| a.subq_id == "S1.2").unwrap();
    assert_eq!(s12.question, "When was Borealis Dynamics founded?");
}

#[test]
fn broken_plan_falls_back_to_one_node() {
    let index = common::fixture_index();
    let q = "Where is Borealis Dynamics headquartered?";
    let gw = Gateway::mock(MockLlm::new().with_plan(q, "no json here")).with_retry(RetryPolicy::immediate(1));
    let engine = Engine::new(&index, gw, &MockEmbedder).unwrap();
    let ans = engine.query(q, &opts(Mode::Full)).unwrap();
    assert!(ans.degraded);
    assert!(ans.trace.plan_error.is_some());
    assert_eq!(ans.per_subq.len(), 1);
    assert_eq!(ans.text, "Tallinn");
    let strict = QueryOptions { plan_fallback: false, ..opts(Mode::Full) };
    assert!(matches!(engine.query(q, &strict), Err(Error::Planning(_))));
}

#[test]
fn provider_outage_degrades_or_fails_cleanly() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, down(), &MockEmbedder).unwrap();
    assert!(matches!(
        engine.query(common::TWO_HOP_QUESTION, &opts(Mode::NoPlan)),
        Err(Error::Generation(_))
    ));
}

#[test]
fn naive_mode_uses_plain_top_k() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let ans = engine.query("Who founded Harbor Loop?", &opts(Mode::Naive)).unwrap();
    assert_eq!(ans.trace.nodes[0].retrieval, RetrievalKind::Naive);
    assert_eq!(ans.text, "Omar Haddad");
}

#[test]
fn invalid_options_are_config_errors() {
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let bad = QueryOptions { context_k: 0, ..Default::default() };
    assert!(matches!(engine.query("Who founded Harbor Loop?", &bad), Err(Error::Config(_))));
    assert!(matches!(engine.query("  ", &QueryOptions::default()), Err(Error::Input(_))));
    assert!("sideways".parse::<Mode>().is_err());
}

#[test]
fn local_search_only_returns_neighborhood_chunks() {
    let index = common::fixture_index();
    let q = MockEmbedder.embed_one("Where is Borealis Dynamics headquartered?").unwrap();
    let params = LocalParams { k_entities: 3, k_chunks: 4 };
    let res = local_search(&index, &q, params).unwrap();
    assert!(res.seeds.len() <= 3 && !res.seeds.is_empty());
    assert!(res.seeds.iter().all(|(_, s)| *s >= SEED_FLOOR));
    assert_eq!(res.seeds[0].0, "borealis dynamics");
    let mut allowed = std::collections::BTreeSet::new();
    for (key, _) in &res.seeds {
        allowed.extend(index.graph.entity(key).unwrap().source_chunks.iter().cloned());
        for n in index.graph.neighbors(key) {
            allowed.extend(index.graph.entity(n).unwrap().source_chunks.iter().cloned());
        }
    }
    assert!(res.chunks.len() <= 4);
    assert_eq!(res.chunks[0].chunk_id, HOP2);
    for pair in res.chunks.windows(2) {
        assert!(pair[0].intrinsic_score >= pair[1].intrinsic_score);
    }
    for c in &res.chunks {
        assert!(allowed.contains(&c.chunk_id));
        assert!((0.0..=1.0).contains(&c.intrinsic_score));
        assert_eq!(c.origin, Origin::Local);
    }
    assert!(local_search(&index, &q, LocalParams { k_entities: 0, k_chunks: 1 }).is_err());
}

#[test]
fn global_search_level_policies() {
    let index = common::fixture_index();
    let q = MockEmbedder.embed_one("What are the main trends across clean energy startups?").unwrap();
    let leaf = global_search(&index, &q, LevelPolicy::Leaf, 3).unwrap();
    let top = global_search(&index, &q, LevelPolicy::Top, 3).unwrap();
    let auto = global_search(&index, &q, LevelPolicy::Auto, 3).unwrap();
    assert_eq!(leaf.level, 0);
    assert_eq!(top.level, index.hierarchy.max_level());
    let best = auto.level_best.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(auto.level_best[auto.level], best);
    assert!(auto.level_best[..auto.level].iter().all(|s| *s < best));
    assert!(leaf.chunks.len() <= 3 && leaf.chunks.iter().all(|c| c.origin == Origin::CommunitySummary));
    for c in &leaf.chunks {
        assert_eq!(index.hierarchy.get(&c.chunk_id).unwrap().level, 0);
    }

    let mut bare = index.clone();
    bare.hierarchy = CommunityHierarchy::default();
    assert!(matches!(global_search(&bare, &q, LevelPolicy::Auto, 3), Err(Error::Config(_))));
}

#[test]
fn naive_search_ranks_every_chunk() {
    let index = common::fixture_index();
    let q = MockEmbedder.embed_one("Who founded Harbor Loop?").unwrap();
    let top = naive_search(&index, &q, 3).unwrap();
    let mut all: Vec<(f64, String)> = index
        .embeddings
        .of_kind(VectorKind::Chunk)
        .map(|(id, v)| (q.cosine(v), id.to_string()))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let want: Vec<&str> = all.iter().take(3).map(|x| x.1.as_str()).collect();
    let got: Vec<&str> = top.iter().map(|c| c.chunk_id.as_str()).collect();
    assert_eq!(got, want);
}

#[test]
fn score_normalization() {
    assert_eq!(normalize_scores(&[0.3, 0.3]), vec![0.5, 0.5]);
    assert_eq!(normalize_scores(&[0.2, 0.6, 0.4]), vec![0.0, 1.0, 0.5000000000000001]);
    assert!(normalize_scores(&[]).is_empty());
}

#[test]
fn classifier_falls_back_to_entity_heuristic() {
    let index = common::fixture_index();
    let c = classify("Where is Borealis Dynamics headquartered?", &common::fixture_gateway(), &index.graph).unwrap();
    assert_eq!((c.value, c.fallback), (QueryType::Scq, false));
    let c = classify("what does borealis dynamics build?", &down(), &index.graph).unwrap();
    assert_eq!((c.value, c.fallback), (QueryType::Scq, true));
    let c = classify("what are the overall trends?", &down(), &index.graph).unwrap();
    assert_eq!((c.value, c.fallback), (QueryType::Acq, true));
}

fn scored(id: &str, text: &str, score: f64) -> ScoredChunk {
    ScoredChunk {
        chunk_id: id.into(),
        text: text.into(),
        origin: Origin::Local,
        intrinsic_score: score,
        similarity_score: None,
        combined_score: None,
    }
}

#[test]
fn synthesis_drops_lowest_scored_knowledge_first() {
    let gw = common::fixture_gateway();
    let resolved = vec![ResolvedAnswer {
        subq_id: "S1.1".into(),
        question: "Where is Borealis Dynamics headquartered?".into(),
        text: "Tallinn".into(),
        cited_chunks: vec![],
        weights_used: None,
        failed: false,
    }];
    let long = "word ".repeat(200);
    let knowledge = vec![scored("low", &long, 0.1), scored("high", &long, 0.9), scored("mid", &long, 0.5)];
    let all = synthesize("q?", &resolved, &knowledge, 10_000, &gw).unwrap();
    assert_eq!(all.knowledge_used, ["high", "mid", "low"]);
    assert!(all.knowledge_dropped.is_empty());
    let budget = all.prompt_tokens - 150;
    let cut = synthesize("q?", &resolved, &knowledge, budget, &gw).unwrap();
    assert_eq!(cut.knowledge_used, ["high", "mid"]);
    assert_eq!(cut.knowledge_dropped, ["low"]);
    assert!(cut.prompt_tokens <= budget);
    assert_eq!(cut.text, "Tallinn");
    assert!(matches!(synthesize("q?", &resolved, &knowledge, 5, &gw), Err(Error::Generation(_))));
}

#[test]
fn empty_context_answers_without_evidence() {
    let dag = PlanDag::single("Who runs the moon?");
    let subq: &SubQuestion = &dag.nodes[&dag.final_node];
    let a = resolve_subquestion(subq, &[], None, &common::fixture_gateway()).unwrap();
    assert!(a.text.starts_with("Insufficient evidence"));
    assert!(a.cited_chunks.is_empty());
    assert!(matches!(resolve_subquestion(subq, &[], None, &down()), Err(Error::Generation(_))));
}
