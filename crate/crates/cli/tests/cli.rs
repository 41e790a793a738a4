use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TWO_HOP: &str = "Which city hosts the main offices of the company Marta Quill founded?";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn pankrag(args: &[&str]) -> Output {
    let plans = fixtures().join("plans.json");
    Command::new(env!("CARGO_BIN_EXE_pankrag"))
        .arg("--plan-scripts")
        .arg(plans)
        .args(args)
        .env_remove("PANKRAG_PROVIDER")
        .env_remove("PANKRAG_INDEX_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn build(dir: &Path) -> PathBuf {
    let idx = dir.join("idx");
    let corpus = fixtures().join("corpus");
    let o = pankrag(&["index", "--corpus", corpus.to_str().unwrap(), "--out", idx.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    idx
}

#[test]
fn index_reports_counts_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(idx.join("manifest.json")).unwrap()).unwrap();
    let counts = &manifest["counts"];
    assert_eq!(counts["chunks.jsonl"], 20);
    assert_eq!(counts["entities.jsonl"], 30);
    assert_eq!(counts["relations.jsonl"], 12);
    assert_eq!(counts["communities.jsonl"], 19);
    assert_eq!(counts["embeddings.meta"], 20 + 30 + 19);
    assert_eq!(manifest["embed_dim"], 512);
    for f in ["chunks.jsonl", "entities.jsonl", "relations.jsonl", "communities.jsonl"] {
        assert!(idx.join(f).is_file(), "{f}");
    }
}

#[test]
fn skip_unchanged_leaves_index_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let before = fs::read(idx.join("manifest.json")).unwrap();
    let corpus = fixtures().join("corpus");
    let o = pankrag(&[
        "index",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        idx.to_str().unwrap(),
        "--skip-unchanged",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("up to date"));
    assert_eq!(fs::read(idx.join("manifest.json")).unwrap(), before);
}

#[test]
fn empty_corpus_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = tmp.path().join("idx");
    let o = pankrag(&["index", "--corpus", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no documents"));
    assert!(!out.exists());
}

#[test]
fn query_cites_both_hops_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let trace = tmp.path().join("trace.json");
    let o = pankrag(&[
        "query",
        TWO_HOP,
        "--index",
        idx.to_str().unwrap(),
        "--json",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["answer"], "Tallinn");
    let cites: Vec<&str> = v["citations"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert!(cites.contains(&"marta_quill_profile.txt#0"));
    assert!(cites.contains(&"borealis_headquarters.txt#0"));

    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["run_config"]["query"]["mode"], "full");
    let log = fs::read_to_string(idx.join("logs/queries.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn no_plan_misses_second_hop() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let o = pankrag(&["query", TWO_HOP, "--index", idx.to_str().unwrap(), "--no-plan", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cites = v["citations"].as_array().unwrap();
    assert!(!cites.iter().any(|c| c == "borealis_headquarters.txt#0"));
}

#[test]
fn explain_prints_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let o = pankrag(&["query", TWO_HOP, "--index", idx.to_str().unwrap(), "--explain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("wave 1: S1.2"));
    assert!(out.contains("combined="));
}

#[test]
fn weights_not_summing_to_one_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let o = pankrag(&["query", TWO_HOP, "--index", idx.to_str().unwrap(), "--alpha", "0.7", "--beta", "0.4"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_index_exits_with_store_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pankrag(&["query", TWO_HOP, "--index", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(7));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let o = pankrag(&["query"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pankrag(&["query", "q", "--mode", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[paths]\nindex_dir = \"idx\"\n\n[query]\nmode = \"no_rerank\"\n").unwrap();
    let trace = tmp.path().join("t.json");
    let o = pankrag(&[
        "--config",
        cfg.to_str().unwrap(),
        "query",
        TWO_HOP,
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["run_config"]["query"]["mode"], "no_rerank");
    assert_eq!(t["run_config"]["paths"]["index_dir"], idx.to_str().unwrap());
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let suite = fixtures().join("gold.jsonl");
    let out = tmp.path().join("sweep.csv");
    let o = pankrag(&[
        "sweep",
        "--index",
        idx.to_str().unwrap(),
        "--suite",
        suite.to_str().unwrap(),
        "--grid-step",
        "0.25",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,beta,precision,recall");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0.0,1.0,"));
    assert!(lines[5].starts_with("1.0,0.0,"));
}

#[test]
fn eval_prints_summary_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    let suite = fixtures().join("gold.jsonl");
    let out = tmp.path().join("eval.csv");
    let o = pankrag(&[
        "eval",
        "--index",
        idx.to_str().unwrap(),
        "--suite",
        suite.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("mode: full"));
    assert!(s.contains("context recall: 1.0000"));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);
}

#[test]
fn plan_shows_waves() {
    let o = pankrag(&["plan", TWO_HOP]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("wave 0: S1.1"));
    assert!(s.contains("wave 1: S1.2"));
}

#[test]
fn export_emits_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = build(tmp.path());
    for what in ["graph", "communities"] {
        let o = pankrag(&["export", what, "--index", idx.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s = stdout(&o);
        assert!(!s.is_empty());
        for line in s.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }
}
