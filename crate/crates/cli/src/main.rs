mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use pankrag::engine::{Engine, FinalAnswer, Mode};
use pankrag::eval::{load_gold, run_suite, sweep, sweep_csv};
use pankrag::index::build_index;
use pankrag::ingest::load_corpus;
use pankrag::llm::http::HttpProvider;
use pankrag::llm::{EmbeddingProvider, Gateway, MockEmbedder, MockLlm, RetryPolicy, TemplateRegistry};
use pankrag::planner::{plan, topo_schedule};
use pankrag::store::{append_query_log, read_index, read_manifest, write_index};
use pankrag::Error;

use config::{env_layer, file_layer, Layer, ProviderKind, RunConfig};

/// Exit statuses. Usage errors exit with 2 from argument parsing.
mod exit {
    pub const GENERIC: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const PLANNING: u8 = 4;
    pub const RETRIEVAL: u8 = 5;
    pub const GENERATION: u8 = 6;
    pub const STORE: u8 = 7;
}

#[derive(Parser)]
#[command(name = "pankrag", version, about = "Graph-based retrieval-augmented question answering")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,
    /// JSON file of scripted plans for the mock provider.
    #[arg(long, global = true)]
    plan_scripts: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a corpus directory.
    Index(IndexArgs),
    /// Answer a question against an index.
    Query(QueryArgs),
    /// Show the sub-question plan for a question.
    Plan(PlanArgs),
    /// Grid alpha (beta = 1 - alpha) over a gold suite.
    Sweep(SweepArgs),
    /// Context precision and recall over a gold suite.
    Eval(EvalArgs),
    /// Dump the graph or the community hierarchy as JSON lines.
    Export(ExportArgs),
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Newline-separated list of corpus files to load.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Do nothing when the corpus and settings match the existing index.
    #[arg(long)]
    skip_unchanged: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    overlap_tokens: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    question: String,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, conflicts_with_all = ["no_plan", "no_rerank"])]
    mode: Option<Mode>,
    /// Answer the question as a single sub-question.
    #[arg(long)]
    no_plan: bool,
    /// Rank by retrieval score alone.
    #[arg(long)]
    no_rerank: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    context_k: Option<usize>,
    /// Print retrieval traces.
    #[arg(long)]
    explain: bool,
    /// Write the full trace as JSON to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the answer as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlanArgs {
    question: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Per-example CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Graph,
    Communities,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(value_enum)]
    what: ExportWhat,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn flag_layer(cli: &Cli) -> Layer {
    let mut l = Layer::default();
    l.set_opt(
        "provider.kind",
        cli.provider.map(|p| match p {
            ProviderArg::Mock => "mock",
            ProviderArg::Http => "http",
        }),
    );
    l.set_path("provider.plan_scripts", cli.plan_scripts.as_deref());
    l.set_opt("workers", cli.workers.map(|w| w as i64));
    match &cli.command {
        Command::Index(a) => {
            l.set_path("paths.corpus_dir", a.corpus.as_deref());
            l.set_path("paths.corpus_manifest", a.manifest.as_deref());
            l.set_path("paths.index_dir", a.out.as_deref());
            l.set_opt("community.leiden_seed", a.seed.map(|s| s as i64));
            l.set_opt("chunking.max_tokens", a.max_tokens.map(|v| v as i64));
            l.set_opt("chunking.overlap_tokens", a.overlap_tokens.map(|v| v as i64));
        }
        Command::Query(a) => {
            l.set_path("paths.index_dir", a.index.as_deref());
            let mode = a.mode.or(if a.no_plan {
                Some(Mode::NoPlan)
            } else if a.no_rerank {
                Some(Mode::NoRerank)
            } else {
                None
            });
            l.set_opt("query.mode", mode.map(|m| m.to_string()));
            l.set_opt("rerank.alpha", a.alpha);
            l.set_opt("rerank.beta", a.beta);
            l.set_opt("retrieval.context_k", a.context_k.map(|v| v as i64));
        }
        Command::Sweep(a) => {
            l.set_path("paths.index_dir", a.index.as_deref());
            l.set_path("paths.suite", a.suite.as_deref());
        }
        Command::Eval(a) => {
            l.set_path("paths.index_dir", a.index.as_deref());
            l.set_path("paths.suite", a.suite.as_deref());
            l.set_opt("query.mode", a.mode.map(|m| m.to_string()));
        }
        Command::Export(a) => l.set_path("paths.index_dir", a.index.as_deref()),
        Command::Plan(_) => {}
    }
    l
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut layers = vec![env_layer()];
    if let Some(path) = &cli.config {
        layers.push(file_layer(path)?);
    }
    layers.push(flag_layer(cli));
    Ok(RunConfig::resolve(&layers)?)
}

struct Providers {
    gateway: Gateway,
    embedder: Box<dyn EmbeddingProvider>,
}

fn providers(cfg: &RunConfig) -> anyhow::Result<Providers> {
    let mut templates = TemplateRegistry::builtin();
    if let Some(dir) = &cfg.provider.templates_dir {
        templates.load_dir(dir)?;
    }
    let retry = RetryPolicy {
        max_attempts: cfg.provider.max_attempts,
        ..RetryPolicy::default()
    };
    let (gateway, embedder): (Gateway, Box<dyn EmbeddingProvider>) = match cfg.provider.kind {
        ProviderKind::Mock => {
            let mut mock = MockLlm::new();
            if let Some(p) = &cfg.provider.plan_scripts {
                mock = mock.load_plans(p)?;
            }
            (Gateway::new(Arc::new(mock), templates), Box::new(MockEmbedder))
        }
        ProviderKind::Http => {
            let http = HttpProvider::new(cfg.http_config());
            (Gateway::new(Arc::new(http.clone()), templates), Box::new(http))
        }
    };
    Ok(Providers {
        gateway: gateway
            .with_retry(retry)
            .with_rate_limit(cfg.provider.requests_per_sec),
        embedder,
    })
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!(Error::Config(format!("no {what} given (use {flag} or the config file)"))))
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_index(cfg: &RunConfig, args: &IndexArgs) -> anyhow::Result<()> {
    let corpus_dir = required(&cfg.paths.corpus_dir, "corpus directory", "--corpus")?;
    let out = required(&cfg.paths.index_dir, "output directory", "--out")?;
    let corpus = load_corpus(corpus_dir, cfg.paths.corpus_manifest.as_deref())?;
    for (path, reason) in &corpus.report.errors {
        eprintln!("skipped {path}: {reason}");
    }
    if corpus.documents.is_empty() {
        return Err(anyhow!(Error::Input(format!("no documents under {}", corpus_dir.display()))));
    }
    let settings = cfg.index_settings();
    let p = providers(cfg)?;
    if args.skip_unchanged {
        if let Ok(m) = read_manifest(out) {
            if m.corpus_hash == corpus.hash
                && m.meta.settings == settings
                && m.meta.llm_provider == p.gateway.provider_name()
                && m.embed_model == p.embedder.name()
            {
                println!("index at {} is up to date ({})", out.display(), m.corpus_hash);
                return Ok(());
            }
        }
    }
    eprintln!("loaded {} documents", corpus.documents.len());
    let (index, report) = build_index(&corpus, &settings, &p.gateway, p.embedder.as_ref())?;
    eprintln!(
        "chunks: {}, entities: {}, relations: {}, communities: {} in {} levels",
        report.chunks,
        index.graph.entity_count(),
        index.graph.relation_count(),
        index.hierarchy.communities().count(),
        index.hierarchy.levels.len()
    );
    for f in &report.extraction_failures {
        eprintln!("extraction failed for {}: {}", f.chunk_id, f.error);
    }
    if !report.summaries.fallbacks.is_empty() {
        eprintln!("{} community summaries fell back to member names", report.summaries.fallbacks.len());
    }
    let manifest = write_index(&index, out)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn explain(ans: &FinalAnswer) -> String {
    let mut s = String::new();
    let t = &ans.trace;
    if let Some(e) = &t.plan_error {
        let _ = writeln!(s, "plan fell back to a single question: {e}");
    }
    let _ = write!(s, "{}", t.plan);
    for (i, wave) in t.schedule.waves.iter().enumerate() {
        let _ = writeln!(s, "wave {i}: {}", wave.join(", "));
    }
    for n in &t.nodes {
        let _ = writeln!(s, "\n[{}] {}", n.id, n.question);
        if let Some(c) = &n.class {
            let _ = writeln!(s, "  class: {} ({})", c.value, c.rationale);
        }
        let _ = writeln!(s, "  retrieval: {:?}, candidates: {}", n.retrieval, n.candidates);
        if let Some(level) = n.level {
            let _ = writeln!(s, "  community level: {level}");
        }
        for (key, score) in &n.seeds {
            let _ = writeln!(s, "  seed {key} {score:.4}");
        }
        if let Some(w) = n.weights {
            let _ = writeln!(s, "  weights: alpha {} beta {}", w.alpha(), w.beta());
        }
        for d in &n.dependency_answers {
            let _ = writeln!(s, "  depends on answer: {d}");
        }
        for c in &n.reranked {
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            let kept = if n.context.contains(&c.chunk_id) { "*" } else { " " };
            let _ = writeln!(
                s,
                "  {kept} {} R={:.4} M={} combined={}",
                c.chunk_id,
                c.intrinsic_score,
                fmt(c.similarity_score),
                fmt(c.combined_score)
            );
        }
        if let Some(e) = &n.error {
            let _ = writeln!(s, "  error: {e}");
        }
    }
    let _ = writeln!(s, "\nknowledge used: {}", t.synthesis.knowledge_used.join(", "));
    if !t.synthesis.knowledge_dropped.is_empty() {
        let _ = writeln!(s, "knowledge dropped: {}", t.synthesis.knowledge_dropped.join(", "));
    }
    s
}

fn open_engine<'a>(
    index: &'a pankrag::index::Index,
    p: &'a Providers,
) -> anyhow::Result<Engine<'a>> {
    Ok(Engine::new(index, p.gateway.clone(), p.embedder.as_ref())?)
}

fn cmd_query(cfg: &RunConfig, args: &QueryArgs) -> anyhow::Result<()> {
    let dir = required(&cfg.paths.index_dir, "index directory", "--index")?;
    let opts = cfg.query_options()?;
    let (index, _) = read_index(dir)?;
    let p = providers(cfg)?;
    let engine = open_engine(&index, &p)?;
    let mut ans = engine.query(&args.question, &opts)?;
    ans.trace.run_config = Some(cfg.to_json());

    if let Some(path) = &args.trace {
        fs::write(path, serde_json::to_string_pretty(&ans.trace)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    append_query_log(
        dir,
        &serde_json::json!({
            "query": ans.query,
            "mode": opts.mode,
            "answer": ans.text,
            "citations": ans.citations,
            "degraded": ans.degraded,
        }),
    )?;

    if args.json {
        let out = serde_json::json!({
            "query": ans.query,
            "answer": ans.text,
            "citations": ans.citations,
            "per_subq": ans.per_subq,
            "degraded": ans.degraded,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{}", ans.text);
        if !ans.citations.is_empty() {
            println!("citations: {}", ans.citations.join(", "));
        }
        if ans.degraded {
            println!("(degraded: some steps fell back)");
        }
    }
    if args.explain {
        print!("\n{}", explain(&ans));
    }
    Ok(())
}

fn cmd_plan(cfg: &RunConfig, args: &PlanArgs) -> anyhow::Result<()> {
    let p = providers(cfg)?;
    let dag = plan(&args.question, &p.gateway)?;
    let schedule = topo_schedule(&dag)?;
    print!("{dag}");
    for (i, wave) in schedule.waves.iter().enumerate() {
        println!("wave {i}: {}", wave.join(", "));
    }
    for r in &dag.repairs {
        println!("repair: {r}");
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> anyhow::Result<()> {
    let dir = required(&cfg.paths.index_dir, "index directory", "--index")?;
    let suite = required(&cfg.paths.suite, "gold suite", "--suite")?;
    let gold = load_gold(suite)?;
    let (index, _) = read_index(dir)?;
    let p = providers(cfg)?;
    let engine = open_engine(&index, &p)?;
    let rows = sweep(&engine, &gold, &cfg.query_options()?, args.grid_step)?;
    write_or_print(args.out.as_deref(), &sweep_csv(&rows)?)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let dir = required(&cfg.paths.index_dir, "index directory", "--index")?;
    let suite = required(&cfg.paths.suite, "gold suite", "--suite")?;
    let gold = load_gold(suite)?;
    let (index, _) = read_index(dir)?;
    let p = providers(cfg)?;
    let engine = open_engine(&index, &p)?;
    let report = run_suite(&engine, &gold, &cfg.query_options()?)?;
    for e in report.examples.iter().filter(|e| e.error.is_some()) {
        eprintln!("failed: {} ({})", e.question, e.error.as_deref().unwrap_or_default());
    }
    if let Some(out) = &args.out {
        fs::write(out, report.to_csv()?).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_export(cfg: &RunConfig, args: &ExportArgs) -> anyhow::Result<()> {
    let dir = required(&cfg.paths.index_dir, "index directory", "--index")?;
    let (index, _) = read_index(dir)?;
    let text = match args.what {
        ExportWhat::Graph => index.graph.to_jsonl(),
        ExportWhat::Communities => index
            .hierarchy
            .communities()
            .map(|c| serde_json::to_string(c).map(|s| s + "\n"))
            .collect::<Result<String, _>>()?,
    };
    write_or_print(args.out.as_deref(), &text)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return exit::GENERIC;
    };
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Planning(_) | Error::Sequencing(_) => exit::PLANNING,
        Error::Retrieval(_) => exit::RETRIEVAL,
        Error::Generation(_) => exit::GENERATION,
        Error::NoIndex(_) | Error::MigrationNeeded { .. } | Error::Corruption(_) | Error::Integrity(_) => exit::STORE,
        _ => exit::GENERIC,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    info!("configuration: {}", cfg.to_json());
    match &cli.command {
        Command::Index(a) => cmd_index(&cfg, a),
        Command::Query(a) => cmd_query(&cfg, a),
        Command::Plan(a) => cmd_plan(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Export(a) => cmd_export(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn,pankrag::index=info",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
