//! Rule-based completion provider for offline runs and tests.
//!
//! Responses are a pure function of the template id and variables (plus the
//! plan scripts loaded at construction):
//!
//! * extraction: runs of capitalized words are entities; the lowercase words
//!   between two adjacent mentions in a sentence become the relation label.
//! * summaries: echo member names (sorted by the caller) and descriptions.
//! * planning: scripted transcripts keyed by question, otherwise a
//!   single-node plan.
//! * classification: any named mention makes a question SCQ.
//! * answering: the last mention in the best-matching sentence of the top
//!   passage that the question does not already name.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use super::templates as t;
use super::{CompletionProvider, CompletionRequest, ProviderError};
use crate::error::{Error, Result};
use crate::text::{content_words, is_stopword, normalize_whitespace, sentences, tokenize};

const NON_ENTITY_CAPS: &[&str] = &[
    "according", "although", "because", "currently", "despite", "during", "finally", "however",
    "initially", "last", "later", "meanwhile", "next", "recently", "since", "today", "together",
    "yesterday",
];

const FIRST_NAMES: &[&str] = &[
    "Ada", "Alice", "Anna", "Bob", "Carol", "Dave", "Elena", "Eve", "Frank", "Grace", "Hana",
    "Ivan", "Jonas", "Lena", "Marta", "Mei", "Nadia", "Omar", "Orin", "Priya", "Rafael", "Sara",
    "Tomas", "Yuki",
];

const PLACES: &[&str] = &[
    "Berlin", "Bergen", "Copenhagen", "Helsinki", "Lisbon", "Lyon", "Oslo", "Reykjavik", "Riga",
    "Stockholm", "Tallinn", "Vilnius",
];

const THEME_WORDS: &[&str] = &[
    "across", "common", "general", "landscape", "main", "overall", "overview", "patterns",
    "summarize", "summary", "theme", "themes", "trend", "trends",
];

const INSUFFICIENT: &str = "Insufficient evidence to answer this question.";

/// Token range of a named mention inside a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_word(tok: &str) -> bool {
    tok.chars().any(char::is_alphanumeric)
}

fn is_capitalized(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_uppercase())
        && !is_stopword(&tok.to_lowercase())
        && !NON_ENTITY_CAPS.contains(&tok.to_lowercase().as_str())
}

/// Maximal runs of capitalized, non-function words.
pub fn mentions(sentence: &str) -> Vec<Mention> {
    let toks = tokenize(sentence);
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if is_capitalized(toks[i]) {
            let start = i;
            while i < toks.len() && is_capitalized(toks[i]) {
                i += 1;
            }
            out.push(Mention {
                text: toks[start..i].join(" "),
                start,
                end: i,
            });
        } else {
            i += 1;
        }
    }
    out
}

pub fn entity_type(name: &str) -> &'static str {
    let parts: Vec<&str> = name.split_whitespace().collect();
    let first = parts.first().copied().unwrap_or("");
    let last = parts.last().copied().unwrap_or("");
    if FIRST_NAMES.contains(&first) {
        "PERSON"
    } else if ["Summit", "Conference", "Festival", "Expo", "Forum", "Fair"].contains(&last) {
        "EVENT"
    } else if ["Award", "Prize", "Medal", "Trophy"].contains(&last) {
        "AWARD"
    } else if PLACES.contains(&name) || ["River", "City", "Valley", "Lake", "Bay", "Harbor"].contains(&last) {
        "LOCATION"
    } else {
        "ORG"
    }
}

/// Relation label from the tokens strictly between two mentions, if they
/// form a short lowercase verb phrase.
fn link_label(between: &[&str]) -> Option<String> {
    if between.is_empty() || between.len() > 6 {
        return None;
    }
    if between
        .iter()
        .any(|w| !is_word(w) || w.chars().next().is_some_and(char::is_uppercase))
    {
        return None;
    }
    let words: Vec<String> = between
        .iter()
        .map(|w| w.to_lowercase())
        .filter(|w| !matches!(w.as_str(), "a" | "an" | "the"))
        .collect();
    if words.iter().all(|w| is_stopword(w)) {
        return None;
    }
    Some(words.join(" "))
}

/// Entity/relation extraction as the mock model performs it.
pub fn extract_json(text: &str) -> Value {
    let mut order: Vec<String> = Vec::new();
    let mut descriptions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut relations = Vec::new();
    let mut seen_rel = BTreeSet::new();
    for sentence in sentences(text) {
        let sentence = normalize_whitespace(sentence);
        let toks = tokenize(&sentence);
        let ms = mentions(&sentence);
        for m in &ms {
            let d = descriptions.entry(m.text.clone()).or_insert_with(|| {
                order.push(m.text.clone());
                Vec::new()
            });
            if !d.contains(&sentence) {
                d.push(sentence.clone());
            }
        }
        for pair in ms.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.text == b.text {
                continue;
            }
            if let Some(label) = link_label(&toks[a.end..b.start]) {
                if seen_rel.insert((a.text.clone(), b.text.clone(), label.clone())) {
                    relations.push(json!({
                        "source": a.text,
                        "target": b.text,
                        "label": label,
                        "description": sentence,
                    }));
                }
            }
        }
    }
    let entities: Vec<Value> = order
        .iter()
        .map(|name| {
            json!({
                "name": name,
                "type": entity_type(name),
                "description": descriptions[name].join(" "),
            })
        })
        .collect();
    json!({"entities": entities, "relations": relations})
}

fn truncate_words(text: &str, max_words: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max_words {
        words.join(" ")
    } else {
        words[..max_words].join(" ")
    }
}

/// `"- name: description"` lines into (name, description).
fn parse_member_lines(block: &str) -> Vec<(String, String)> {
    block
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|l| match l.split_once(": ") {
            Some((n, d)) => (n.trim().to_string(), d.trim().to_string()),
            None => (l.trim().to_string(), String::new()),
        })
        .collect()
}

/// `"[id] text"` lines into (id, text).
fn parse_passages(block: &str) -> Vec<(String, String)> {
    block
        .lines()
        .filter_map(|l| {
            let l = l.trim().strip_prefix('[')?;
            let (id, rest) = l.split_once("] ")?;
            Some((id.to_string(), rest.to_string()))
        })
        .collect()
}

fn single_node_plan(query: &str) -> String {
    let plan = json!({
        "ambiguous": false,
        "nodes": [{"id": "S1.1", "text": query, "kind": "standard"}],
        "edges": [],
        "final": "S1.1",
    });
    format!("```json\n{}\n```", serde_json::to_string_pretty(&plan).unwrap())
}

#[derive(Debug, Deserialize)]
struct ScriptEntry {
    query: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    plan: Option<Value>,
}

#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    plans: BTreeMap<String, String>,
}

fn plan_key(query: &str) -> String {
    normalize_whitespace(query)
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Script the raw planning transcript returned for `query`.
    pub fn with_plan(mut self, query: &str, transcript: impl Into<String>) -> Self {
        self.plans.insert(plan_key(query), transcript.into());
        self
    }

    /// Load scripted plans from a JSON array of
    /// `{"query": ..., "plan": {...}}` or `{"query": ..., "response": "raw"}`.
    pub fn load_plans(mut self, path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("plan script {}: {e}", path.display())))?;
        for e in entries {
            let transcript = match (e.response, e.plan) {
                (Some(r), _) => r,
                (None, Some(p)) => {
                    format!("```json\n{}\n```", serde_json::to_string_pretty(&p).unwrap())
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "plan script entry for {:?} has neither response nor plan",
                        e.query
                    )))
                }
            };
            self.plans.insert(plan_key(&e.query), transcript);
        }
        Ok(self)
    }

    pub fn scripted_queries(&self) -> impl Iterator<Item = &str> {
        self.plans.keys().map(String::as_str)
    }

    fn plan(&self, query: &str) -> String {
        self.plans
            .get(&plan_key(query))
            .cloned()
            .unwrap_or_else(|| single_node_plan(query))
    }

    fn classify(question: &str) -> String {
        let names: Vec<String> = sentences(question)
            .iter()
            .flat_map(|s| mentions(s))
            .map(|m| m.text)
            .collect();
        let (class, rationale) = if !names.is_empty() {
            ("SCQ", format!("mentions named entities: {}", names.join(", ")))
        } else if content_words(question)
            .iter()
            .any(|w| THEME_WORDS.contains(&w.as_str()))
        {
            ("ACQ", "no named entity; asks about themes".to_string())
        } else {
            ("ACQ", "no named entity".to_string())
        };
        json!({"class": class, "rationale": rationale}).to_string()
    }

    fn answer(question: &str, context: &str) -> String {
        let passages = parse_passages(context);
        let Some((top_id, top_text)) = passages.first() else {
            return json!({"answer": INSUFFICIENT, "citations": []}).to_string();
        };
        let q_words: BTreeSet<String> = content_words(question).into_iter().collect();
        let q_lower = question.to_lowercase();
        let best = sentences(top_text)
            .into_iter()
            .enumerate()
            .max_by_key(|(i, s)| {
                let overlap = content_words(s).iter().filter(|w| q_words.contains(*w)).count();
                (overlap, std::cmp::Reverse(*i))
            })
            .map(|(_, s)| s.to_string())
            .unwrap_or_else(|| top_text.clone());
        let answer = mentions(&best)
            .into_iter()
            .rev()
            .find(|m| !q_lower.contains(&m.text.to_lowercase()))
            .map(|m| m.text)
            .unwrap_or(best);
        json!({"answer": answer, "citations": [top_id]}).to_string()
    }

    fn synthesize(resolved: &str, knowledge: &str) -> String {
        let answer = resolved
            .lines()
            .rev()
            .find_map(|l| l.split_once(" => ").map(|(_, a)| a.trim().to_string()))
            .unwrap_or_else(|| INSUFFICIENT.to_string());
        let citations: Vec<String> = parse_passages(knowledge)
            .into_iter()
            .take(1)
            .map(|(id, _)| id)
            .collect();
        json!({"answer": answer, "citations": citations}).to_string()
    }

    fn summarize_community(vars: &BTreeMap<String, String>) -> String {
        let id = &vars["community_id"];
        let members = parse_member_lines(&vars["members"]);
        let names: Vec<&str> = members.iter().map(|(n, _)| n.as_str()).collect();
        let details: Vec<&str> = members
            .iter()
            .map(|(_, d)| d.as_str())
            .filter(|d| !d.is_empty())
            .collect();
        let head = if vars["kind"] == "communities" {
            format!("Community {id} aggregates {}.", names.join(", "))
        } else {
            format!("Community {id} covers {}.", names.join(", "))
        };
        truncate_words(&format!("{head} {}", details.join(" ")), 400)
    }

    fn respond(&self, req: &CompletionRequest) -> Result<String, String> {
        let var = |k: &str| {
            req.variables
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| format!("missing variable {k}"))
        };
        Ok(match req.template_id.as_str() {
            t::EXTRACT_ENTITIES => extract_json(var("text")?).to_string(),
            t::SUMMARIZE_DESCRIPTION => {
                let desc = var("description")?;
                let mut out = String::new();
                for s in sentences(desc) {
                    if out.split_whitespace().count() + s.split_whitespace().count() > 120 {
                        break;
                    }
                    out.push_str(s);
                    out.push(' ');
                }
                if out.is_empty() {
                    truncate_words(desc, 120)
                } else {
                    out.trim_end().to_string()
                }
            }
            t::SUMMARIZE_COMMUNITY => {
                var("community_id")?;
                var("members")?;
                var("kind")?;
                Self::summarize_community(&req.variables)
            }
            t::PLAN_QUERY => self.plan(var("query")?),
            t::CLASSIFY_QUERY => Self::classify(var("question")?),
            t::ANSWER_SUBQUESTION => Self::answer(var("question")?, var("context")?),
            t::ANSWER_WITHOUT_CONTEXT => json!({"answer": INSUFFICIENT, "citations": []}).to_string(),
            t::SYNTHESIZE_ANSWER => Self::synthesize(var("resolved")?, var("knowledge")?),
            other => return Err(format!("mock has no rule for template {other}")),
        })
    }
}

impl CompletionProvider for MockLlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest, _prompt: &str) -> Result<String, ProviderError> {
        self.respond(request).map_err(ProviderError::Fatal)
    }
}
