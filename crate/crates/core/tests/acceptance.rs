//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use pankrag::community::{leiden_partition, WeightedGraph};
use pankrag::engine::{Engine, Mode, QueryOptions};
use pankrag::eval::{context_metrics, load_gold, run_suite, sweep, sweep_csv};
use pankrag::graph::{extract_all, merge};
use pankrag::index::Index;
use pankrag::ingest::{load_corpus, segment_all, ChunkingConfig};
use pankrag::llm::mock::MockLlm;
use pankrag::llm::{Gateway, MockEmbedder};
use pankrag::planner::{plan, topo_schedule, PlanDag, SubQuestion, SubQuestionKind};
use pankrag::rerank::{default_weights, rerank_with_similarity, RerankWeights};
use pankrag::retrieval::{Origin, QueryType, ScoredChunk};
use pankrag::store::{read_index, write_index, write_index_with, WriteOptions};
use pankrag::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALE: i64 = 1_000_000;

fn chunk(i: usize, r: f64) -> ScoredChunk {
    ScoredChunk {
        chunk_id: format!("c{i}"),
        text: String::new(),
        origin: Origin::Local,
        intrinsic_score: r,
        similarity_score: None,
        combined_score: None,
    }
}

fn position(out: &[ScoredChunk], id: &str) -> usize {
    out.iter().position(|c| c.chunk_id == id).unwrap_or(usize::MAX)
}

fn rerank_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = 8;
        let a = rng.random_range(0..=SCALE);
        let rs: Vec<i64> = (0..n).map(|_| rng.random_range(0..=SCALE)).collect();
        let ms: Vec<i64> = (0..n).map(|_| rng.random_range(0..=SCALE)).collect();
        let f = |x: i64| x as f64 / SCALE as f64;
        let alpha = f(a);
        let w = RerankWeights::new(alpha, 1.0 - alpha).unwrap();
        let chunks: Vec<ScoredChunk> = rs.iter().enumerate().map(|(i, r)| chunk(i, f(*r))).collect();
        let m: Vec<f64> = ms.iter().map(|x| f(*x)).collect();
        let out = rerank_with_similarity(&chunks, Some(&m), w);
        for c in &out {
            let i: usize = c.chunk_id[1..].parse().unwrap();
            // Exact integer numerator over SCALE^2.
            let exact = (a as i128 * rs[i] as i128 + (SCALE - a) as i128 * ms[i] as i128) as f64
                / (SCALE as f64 * SCALE as f64);
            assert!((c.combined_score.unwrap() - exact).abs() <= 1e-12, "{} vs {exact}", c.combined_score.unwrap());
        }

        let flat = rerank_with_similarity(&chunks, Some(&m), RerankWeights::intrinsic_only());
        let mut by_r: Vec<usize> = (0..n).collect();
        by_r.sort_by(|&x, &y| rs[y].cmp(&rs[x]).then(format!("c{x}").cmp(&format!("c{y}"))));
        let got: Vec<String> = flat.iter().map(|c| c.chunk_id.clone()).collect();
        let want: Vec<String> = by_r.iter().map(|i| format!("c{i}")).collect();
        assert_eq!(got, want);

        let k = rng.random_range(0..n);
        let id = format!("c{k}");
        let before = position(&out, &id);
        let mut bumped = m.clone();
        bumped[k] = (bumped[k] + rng.random_range(0.0..=1.0)).min(1.0);
        let after = position(&rerank_with_similarity(&chunks, Some(&bumped), w), &id);
        assert!(after <= before, "raising M moved {id} from {before} to {after}");
    }
}

fn default_weight_anchors() {
    let scq = default_weights(QueryType::Scq);
    let acq = default_weights(QueryType::Acq);
    assert_eq!((scq.alpha(), scq.beta()), (0.6, 0.4));
    assert_eq!((acq.alpha(), acq.beta()), (0.75, 0.25));
    for i in 0..=20 {
        for j in 0..=20 {
            let (alpha, beta) = (i as f64 / 20.0, j as f64 / 20.0);
            let ok = RerankWeights::new(alpha, beta).is_ok();
            assert_eq!(ok, i + j == 20, "({alpha}, {beta})");
        }
    }
    for (alpha, beta) in [(-0.05, 1.05), (1.05, -0.05), (f64::NAN, 0.5), (0.5, f64::INFINITY)] {
        assert!(RerankWeights::new(alpha, beta).is_err());
    }
}

fn brute_force_modularity(n: usize, edges: &[(usize, usize, f64)], part: &[usize]) -> f64 {
    let mut adj = vec![vec![0.0; n]; n];
    for &(u, v, w) in edges {
        adj[u][v] += w;
        adj[v][u] += w;
    }
    let k: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if part[i] == part[j] {
                q += adj[i][j] - k[i] * k[j] / m2;
            }
        }
    }
    q / m2
}

fn leiden_correctness() {
    let n = 10;
    let mut edges = Vec::new();
    for base in [0, 5] {
        for i in base..base + 5 {
            for j in i + 1..base + 5 {
                edges.push((i, j, 1.0));
            }
        }
    }
    edges.push((4, 5, 1.0));
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 1u32..(1 << (n - 1)) {
        let part: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let q = brute_force_modularity(n, &edges, &part);
        if q > best.0 + 1e-12 {
            best = (q, mask);
        }
    }
    let cliques: Vec<usize> = (0..n).map(|i| usize::from(i >= 5)).collect();
    let best_part: Vec<usize> = (0..n).map(|i| ((best.1 >> i) & 1) as usize).collect();
    let same_split = |a: &[usize], b: &[usize]| (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
    assert!(same_split(&best_part, &cliques), "brute force prefers {best_part:?}");

    let g = WeightedGraph::from_edges(n, &edges).unwrap();
    let first = leiden_partition(&g, 1.0, 42);
    assert!(same_split(&first, &cliques), "leiden found {first:?}");
    for c in first.iter().collect::<BTreeSet<_>>() {
        let members: Vec<usize> = (0..n).filter(|i| first[*i] == *c).collect();
        let mut seen = BTreeSet::from([members[0]]);
        let mut stack = vec![members[0]];
        while let Some(u) = stack.pop() {
            for &(a, b, _) in &edges {
                let v = if a == u { b } else if b == u { a } else { continue };
                if first[v] == *c && seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        assert_eq!(seen.len(), members.len(), "community {c} is disconnected");
    }
    for _ in 0..10 {
        assert_eq!(leiden_partition(&g, 1.0, 42), first);
    }
}

fn subq(id: &str, deps: BTreeSet<String>) -> SubQuestion {
    let seq: u32 = id[1..id.find('.').unwrap()].parse().unwrap();
    SubQuestion {
        id: id.into(),
        text: format!("question {id}"),
        kind: SubQuestionKind::Standard,
        depends_on: deps,
        sequence: seq,
        resolved_answer: None,
    }
}

fn plan_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.random_range(1..=12);
        let mut ids: Vec<String> = (0..n).map(|i| format!("S{}.{}", 1 + i % 4, 1 + i / 4)).collect();
        ids.shuffle(&mut rng);
        let mut dag = PlanDag::single("random");
        dag.nodes.clear();
        dag.edges.clear();
        for (j, id) in ids.iter().enumerate() {
            let mut deps = BTreeSet::new();
            for earlier in &ids[..j] {
                if rng.random_bool(0.3) {
                    deps.insert(earlier.clone());
                    dag.edges.push((earlier.clone(), id.clone()));
                }
            }
            dag.nodes.insert(id.clone(), subq(id, deps));
        }
        dag.final_node = ids[n - 1].clone();
        let s = topo_schedule(&dag).unwrap();
        assert_eq!(s.waves.concat().len(), n);
        for (a, b) in &dag.edges {
            assert!(s.wave_of(a).unwrap() < s.wave_of(b).unwrap(), "{a} -> {b}");
        }
    }

    let q = "Which was founded first, the company Marta Quill started or the lab Lena Ortiz runs?";
    let transcript = r#"{"ambiguous": true,
 "nodes": [
   {"id": "S0.1", "text": "What does 'the lab Lena Ortiz runs' refer to?", "kind": "disambiguation"},
   {"id": "S1.1", "text": "Which company did Marta Quill start?", "kind": "standard"},
   {"id": "S1.2", "text": "When was [A1.1] founded?", "kind": "standard"},
   {"id": "S2.1", "text": "When was [A0.1] founded?", "kind": "standard"},
   {"id": "S3.1", "text": "Which is earlier, [A1.2] or [A2.1]?", "kind": "standard"}
 ],
 "edges": [["S0.1", "S1.1"], ["S0.1", "S2.1"], ["S1.1", "S1.2"], ["S1.2", "S3.1"], ["S2.1", "S3.1"]],
 "final": "S3.1"}"#;
    let dag = plan(q, &Gateway::mock(MockLlm::new().with_plan(q, transcript))).unwrap();
    let waves = topo_schedule(&dag).unwrap().waves;
    assert_eq!(
        waves,
        vec![vec!["S0.1"], vec!["S1.1", "S2.1"], vec!["S1.2"], vec!["S3.1"]]
            .into_iter()
            .map(|w| w.into_iter().map(String::from).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    );

    let (mut repaired, mut rejected) = (0, 0);
    for case in 0..200 {
        let n = rng.random_range(2..=6);
        let ids: Vec<String> = (0..n).map(|i| format!("S1.{}", i + 1)).collect();
        let mut edges: Vec<(String, String)> = (0..n).map(|i| (ids[i].clone(), ids[(i + 1) % n].clone())).collect();
        for _ in 0..rng.random_range(0..4) {
            edges.push((ids[rng.random_range(0..n)].clone(), ids[rng.random_range(0..n)].clone()));
        }
        let mut nodes: Vec<serde_json::Value> = ids
            .iter()
            .map(|id| serde_json::json!({"id": id, "text": format!("question {id}"), "kind": "standard"}))
            .collect();
        if rng.random_bool(0.3) {
            // A placeholder cycle cannot be repaired by dropping an edge.
            nodes[0]["text"] = format!("about [A1.{n}]").into();
            nodes[n - 1]["text"] = "about [A1.1]".into();
        }
        let wire = serde_json::json!({"nodes": nodes, "edges": edges, "final": ids[n - 1]});
        let q = format!("cyclic case {case}");
        let gw = Gateway::mock(MockLlm::new().with_plan(&q, wire.to_string()));
        match plan(&q, &gw) {
            Ok(dag) => {
                dag.validate().unwrap();
                topo_schedule(&dag).unwrap();
                assert!(!dag.repairs.is_empty());
                repaired += 1;
            }
            Err(Error::Planning(_)) => {
                rejected += 1;
                let index = common::fixture_index_cached();
                let engine = Engine::new(index, gw, &MockEmbedder).unwrap();
                let strict = QueryOptions { plan_fallback: false, ..Default::default() };
                assert!(matches!(engine.query(&q, &strict), Err(Error::Planning(_))));
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    assert!(repaired > 0 && rejected > 0, "repaired {repaired}, rejected {rejected}");
}

fn end_to_end() {
    let hop1 = "marta_quill_profile.txt#0".to_string();
    let hop2 = "borealis_headquarters.txt#0".to_string();
    let gold: BTreeSet<String> = [hop1.clone(), hop2.clone()].into();
    let run = || {
        let index = common::fixture_index();
        let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
        let full = engine
            .query(common::TWO_HOP_QUESTION, &QueryOptions { mode: Mode::Full, ..Default::default() })
            .unwrap();
        let no_plan = engine
            .query(common::TWO_HOP_QUESTION, &QueryOptions { mode: Mode::NoPlan, ..Default::default() })
            .unwrap();
        (full, no_plan)
    };
    let (full, no_plan) = run();
    assert!(full.citations.contains(&hop1) && full.citations.contains(&hop2), "{:?}", full.citations);
    let full_recall = context_metrics(&full.retrieved_chunks(), &gold).1;
    let no_plan_recall = context_metrics(&no_plan.retrieved_chunks(), &gold).1;
    assert!(no_plan_recall < full_recall, "{no_plan_recall} vs {full_recall}");
    assert_eq!(run(), (full, no_plan));
}

fn ablation_ordering() {
    let gold = load_gold(&common::fixtures().join("gold.jsonl")).unwrap();
    let index = common::fixture_index();
    let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
    let recall = |mode| run_suite(&engine, &gold, &QueryOptions { mode, ..Default::default() }).unwrap().recall;
    let (full, no_rerank, no_plan) = (recall(Mode::Full), recall(Mode::NoRerank), recall(Mode::NoPlan));
    println!("    recall: full {full:.4}, no_rerank {no_rerank:.4}, no_plan {no_plan:.4}");
    assert!(full > no_rerank && no_rerank > no_plan);

    let csv = || {
        let index = common::fixture_index();
        let engine = Engine::new(&index, common::fixture_gateway(), &MockEmbedder).unwrap();
        sweep_csv(&sweep(&engine, &gold, &QueryOptions::default(), 0.05).unwrap()).unwrap()
    };
    let first = csv();
    assert_eq!(first.lines().count(), 22);
    assert_eq!(first.as_bytes(), csv().as_bytes());
}

fn store_durability() {
    let new = common::fixture_index();
    let mut old: Index = new.clone();
    old.chunks.values_mut().for_each(|c| c.text.push_str(" (old)"));
    old.meta.corpus_hash = "old".into();
    let tmp = tempfile::tempdir().unwrap();

    let dir = tmp.path().join("roundtrip");
    write_index(&new, &dir).unwrap();
    assert_eq!(read_index(&dir).unwrap().0, new);

    let mut kills = 0;
    for previous in [None, Some(&old)] {
        for k in 0.. {
            let dir = tmp.path().join(format!("kill-{}-{k}", previous.is_some()));
            if let Some(p) = previous {
                write_index(p, &dir).unwrap();
            }
            let count = std::cell::Cell::new(0);
            let hook = |_: &str| {
                count.set(count.get() + 1);
                if count.get() == k + 1 {
                    Err(Error::Integrity("injected crash".into()))
                } else {
                    Ok(())
                }
            };
            let res = write_index_with(&new, &dir, WriteOptions { checkpoint: Some(&hook), ..Default::default() });
            if res.is_ok() {
                break;
            }
            kills += 1;
            match (read_index(&dir), previous) {
                (Ok((got, _)), Some(p)) => assert!(got == *p || got == new),
                (Ok((got, _)), None) => assert_eq!(got, new),
                (Err(Error::NoIndex(_)), None) => {}
                (Err(e), _) => panic!("kill point {k}: {e}"),
            }
        }
    }
    println!("    injected kill points: {kills}");
    assert!(kills >= 50);
}

fn merge_algebra() {
    let corpus = load_corpus(&common::fixtures().join("corpus"), None).unwrap();
    let chunks = segment_all(&corpus.documents, ChunkingConfig::default()).unwrap();
    let (mut extractions, failures) = extract_all(&chunks, &common::fixture_gateway(), 4).unwrap();
    assert!(failures.is_empty());
    let reference = merge(&extractions).to_jsonl();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        extractions.shuffle(&mut rng);
        assert_eq!(merge(&extractions).to_jsonl(), reference);
    }
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn(),
}

fn main() {
    let criteria = [
        Criterion { name: "rerank arithmetic", limit: Duration::from_secs(1), run: rerank_arithmetic },
        Criterion { name: "default weights", limit: Duration::MAX, run: default_weight_anchors },
        Criterion { name: "leiden correctness", limit: Duration::from_secs(5), run: leiden_correctness },
        Criterion { name: "plan and DAG properties", limit: Duration::from_secs(5), run: plan_properties },
        Criterion { name: "end-to-end mock pipeline", limit: Duration::from_secs(30), run: end_to_end },
        Criterion { name: "ablation ordering and sweep", limit: Duration::MAX, run: ablation_ordering },
        Criterion { name: "store durability", limit: Duration::MAX, run: store_durability },
        Criterion { name: "merge order independence", limit: Duration::MAX, run: merge_algebra },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let took = start.elapsed();
        let verdict = match outcome {
            Err(_) => "FAIL",
            Ok(()) if took > c.limit => "FAIL (too slow)",
            Ok(()) => "PASS",
        };
        let limit = if c.limit == Duration::MAX { String::new() } else { format!(", limit {:?}", c.limit) };
        println!("criterion {}: {verdict} - {} ({:.3}s{limit})", i + 1, c.name, took.as_secs_f64());
        if verdict != "PASS" {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
