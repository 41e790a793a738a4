//! Set-based context precision and recall against labeled evidence, suite
//! runs per mode, and the alpha sweep.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Mode, QueryOptions};
use crate::error::{Error, Result};
use crate::rerank::RerankWeights;
use crate::retrieval::QueryType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExample {
    pub question: String,
    pub gold_answer: String,
    pub gold_chunk_ids: BTreeSet<String>,
    pub query_class: QueryType,
}

/// One example per non-blank line.
pub fn load_gold(path: &Path) -> Result<Vec<GoldExample>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// (precision, recall) of `retrieved` against `gold`. Duplicates in
/// `retrieved` count once.
pub fn context_metrics(retrieved: &[String], gold: &BTreeSet<String>) -> (f64, f64) {
    let mut seen = BTreeSet::new();
    let unique: Vec<&String> = retrieved.iter().filter(|r| seen.insert(*r)).collect();
    let hits = unique.iter().filter(|r| gold.contains(**r)).count() as f64;
    let precision = match (unique.is_empty(), gold.is_empty()) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => hits / unique.len() as f64,
    };
    let recall = if gold.is_empty() { 1.0 } else { hits / gold.len() as f64 };
    (precision, recall)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleResult {
    pub question: String,
    pub precision: f64,
    pub recall: f64,
    pub answer: String,
    pub retrieved: Vec<String>,
    pub citations: Vec<String>,
    pub degraded: bool,
    /// Set when the query failed outright; metrics are then 0.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub mode: Mode,
    pub examples: Vec<ExampleResult>,
    pub precision: f64,
    pub recall: f64,
    pub failures: usize,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    question: &'a str,
    precision: f64,
    recall: f64,
    degraded: bool,
    error: &'a str,
    retrieved: String,
}

impl SuiteReport {
    /// One row per example.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.examples {
            w.serialize(CsvRow {
                question: &e.question,
                precision: e.precision,
                recall: e.recall,
                degraded: e.degraded,
                error: e.error.as_deref().unwrap_or(""),
                retrieved: e.retrieved.join(" "),
            })
            .map_err(|e| Error::Integrity(format!("csv: {e}")))?;
        }
        csv_string(w)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode);
        let _ = writeln!(s, "examples: {}", self.examples.len());
        let _ = writeln!(s, "failures: {}", self.failures);
        let _ = writeln!(s, "context precision: {:.4}", self.precision);
        let _ = writeln!(s, "context recall: {:.4}", self.recall);
        s
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Integrity(format!("csv: {e}")))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Run every example under `opts`. Gold ids must resolve in the engine's
/// index; a failing query is recorded and the suite moves on.
pub fn run_suite(engine: &Engine, examples: &[GoldExample], opts: &QueryOptions) -> Result<SuiteReport> {
    for ex in examples {
        if let Some(id) = ex.gold_chunk_ids.iter().find(|id| engine.index().chunk(id).is_none()) {
            return Err(Error::Input(format!(
                "gold chunk {id} for {:?} is not in the index",
                ex.question
            )));
        }
    }
    let results: Vec<ExampleResult> = examples
        .par_iter()
        .map(|ex| match engine.query(&ex.question, opts) {
            Ok(ans) => {
                let retrieved = ans.retrieved_chunks();
                let (precision, recall) = context_metrics(&retrieved, &ex.gold_chunk_ids);
                ExampleResult {
                    question: ex.question.clone(),
                    precision,
                    recall,
                    answer: ans.text,
                    retrieved,
                    citations: ans.citations,
                    degraded: ans.degraded,
                    error: None,
                }
            }
            Err(e) => ExampleResult {
                question: ex.question.clone(),
                precision: 0.0,
                recall: 0.0,
                answer: String::new(),
                retrieved: Vec::new(),
                citations: Vec::new(),
                degraded: true,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(SuiteReport {
        mode: opts.mode,
        precision: mean(results.iter().map(|r| r.precision)),
        recall: mean(results.iter().map(|r| r.recall)),
        failures: results.iter().filter(|r| r.error.is_some()).count(),
        examples: results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Alpha values from 0 to 1 inclusive; `step` must divide 1.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} must lie in (0, 1]")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// One `full` suite run per grid point with explicit weights.
pub fn sweep(
    engine: &Engine,
    examples: &[GoldExample],
    base: &QueryOptions,
    grid_step: f64,
) -> Result<Vec<SweepRow>> {
    alpha_grid(grid_step)?
        .into_iter()
        .map(|alpha| {
            let weights = RerankWeights::new(alpha, 1.0 - alpha)?;
            let opts = QueryOptions {
                mode: Mode::Full,
                weights: Some(weights),
                ..base.clone()
            };
            let report = run_suite(engine, examples, &opts)?;
            Ok(SweepRow {
                alpha: weights.alpha(),
                beta: weights.beta(),
                precision: report.precision,
                recall: report.recall,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    }
    csv_string(w)
}
