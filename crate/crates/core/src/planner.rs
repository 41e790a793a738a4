//! Query decomposition into a sub-question DAG and its execution schedule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::templates::PLAN_QUERY;
use crate::llm::{parse_json, CompletionRequest, Gateway};

pub const MAX_SUBQUESTIONS: usize = 12;

static ID_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^S(\d+)\.(\d+)$").unwrap());
static PLACEHOLDER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[A(\d+)\.(\d+)\]").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubQuestionKind {
    Disambiguation,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub id: String,
    pub text: String,
    pub kind: SubQuestionKind,
    pub depends_on: BTreeSet<String>,
    pub sequence: u32,
    pub resolved_answer: Option<String>,
}

/// `(sequence, step)` of an id like `S2.1`.
pub fn parse_id(id: &str) -> Option<(u32, u32)> {
    let caps = ID_RE.captures(id)?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

fn sort_ids(ids: &mut [String]) {
    ids.sort_by_key(|id| (parse_id(id).unwrap_or((u32::MAX, u32::MAX)), id.clone()));
}

/// Sub-question ids referenced by `[A<seq>.<step>]` placeholders.
pub fn placeholders(text: &str) -> Vec<String> {
    PLACEHOLDER_RE
        .captures_iter(text)
        .map(|c| format!("S{}.{}", &c[1], &c[2]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDag {
    pub query: String,
    pub nodes: BTreeMap<String, SubQuestion>,
    /// `(prerequisite, dependent)` pairs.
    pub edges: Vec<(String, String)>,
    pub final_node: String,
    pub ambiguous: bool,
    /// Fixes applied to the model's plan, in order.
    pub repairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub waves: Vec<Vec<String>>,
}

impl Schedule {
    pub fn wave_of(&self, id: &str) -> Option<usize> {
        self.waves.iter().position(|w| w.iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct WireNode {
    id: String,
    text: String,
    #[serde(default)]
    kind: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct WirePlan {
    #[serde(default)]
    ambiguous: bool,
    nodes: Vec<WireNode>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    #[serde(default, rename = "final")]
    final_node: Option<String>,
}

fn reaches(adj: &BTreeMap<String, BTreeSet<String>>, from: &str, to: &str) -> bool {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        if v == to {
            return true;
        }
        for u in adj.get(v).into_iter().flatten() {
            if seen.insert(u.as_str()) {
                queue.push_back(u.as_str());
            }
        }
    }
    false
}

struct Builder {
    nodes: BTreeMap<String, SubQuestion>,
    edges: Vec<(String, String)>,
    adj: BTreeMap<String, BTreeSet<String>>,
    repairs: Vec<String>,
}

impl Builder {
    /// Add an edge unless it is unknown, a self-loop, a duplicate or closes a cycle.
    fn try_edge(&mut self, from: &str, to: &str, origin: &str) -> bool {
        if !self.nodes.contains_key(from) || !self.nodes.contains_key(to) {
            self.repairs.push(format!("dropped {origin} edge {from}->{to}: unknown endpoint"));
            return false;
        }
        if from == to {
            self.repairs.push(format!("dropped {origin} self-loop on {from}"));
            return false;
        }
        if self.adj.get(from).is_some_and(|s| s.contains(to)) {
            return false;
        }
        if reaches(&self.adj, to, from) {
            self.repairs.push(format!("dropped {origin} edge {from}->{to}: closes a cycle"));
            return false;
        }
        self.adj.entry(from.to_string()).or_default().insert(to.to_string());
        self.edges.push((from.to_string(), to.to_string()));
        true
    }

    fn in_degree(&self, id: &str) -> usize {
        self.edges.iter().filter(|(_, b)| b == id).count()
    }

    fn out_degree(&self, id: &str) -> usize {
        self.edges.iter().filter(|(a, _)| a == id).count()
    }
}

impl PlanDag {
    /// The no-plan shape: one node carrying the query itself.
    pub fn single(query: &str) -> Self {
        let node = SubQuestion {
            id: "S1.1".into(),
            text: query.to_string(),
            kind: SubQuestionKind::Standard,
            depends_on: BTreeSet::new(),
            sequence: 1,
            resolved_answer: None,
        };
        Self {
            query: query.to_string(),
            nodes: BTreeMap::from([(node.id.clone(), node)]),
            edges: Vec::new(),
            final_node: "S1.1".into(),
            ambiguous: false,
            repairs: Vec::new(),
        }
    }

    /// Validate a decoded plan, applying one round of repairs.
    pub fn from_wire(query: &str, wire: WirePlan) -> Result<Self> {
        let bad = |m: String| Err(Error::Planning(m));
        if wire.nodes.is_empty() {
            return bad("plan has no sub-questions".into());
        }
        if wire.nodes.len() > MAX_SUBQUESTIONS {
            return bad(format!(
                "plan has {} sub-questions, the cap is {MAX_SUBQUESTIONS}",
                wire.nodes.len()
            ));
        }
        let mut b = Builder {
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            adj: BTreeMap::new(),
            repairs: Vec::new(),
        };
        for n in wire.nodes {
            let Some((sequence, _)) = parse_id(&n.id) else {
                return bad(format!("malformed sub-question id {:?}", n.id));
            };
            if n.text.trim().is_empty() {
                return bad(format!("sub-question {} has no text", n.id));
            }
            let kind = match (n.kind.as_deref(), sequence) {
                (Some("disambiguation") | None, 0) | (Some("standard"), 0) => SubQuestionKind::Disambiguation,
                (Some("standard") | None, _) => SubQuestionKind::Standard,
                (Some("disambiguation"), s) => {
                    return bad(format!("disambiguation node {} must be in sequence 0, not {s}", n.id))
                }
                (Some(other), _) => return bad(format!("unknown kind {other:?} on {}", n.id)),
            };
            let q = SubQuestion {
                id: n.id.clone(),
                text: n.text.trim().to_string(),
                kind,
                depends_on: BTreeSet::new(),
                sequence,
                resolved_answer: None,
            };
            if b.nodes.insert(n.id.clone(), q).is_some() {
                return bad(format!("duplicate sub-question id {}", n.id));
            }
        }

        for (from, to) in &wire.edges {
            let into_dis = parse_id(to).is_some_and(|(s, _)| s == 0) && parse_id(from).is_some_and(|(s, _)| s != 0);
            if into_dis && b.nodes.contains_key(to) {
                b.repairs.push(format!("dropped declared edge {from}->{to}: disambiguation runs first"));
                continue;
            }
            b.try_edge(from, to, "declared");
        }

        // placeholders imply progress edges
        let texts: Vec<(String, String)> = b.nodes.values().map(|q| (q.id.clone(), q.text.clone())).collect();
        for (id, text) in &texts {
            for dep in placeholders(text) {
                if !b.nodes.contains_key(&dep) {
                    return bad(format!("{id} refers to unknown answer of {dep}"));
                }
                if !b.adj.get(&dep).is_some_and(|s| s.contains(id)) && !b.try_edge(&dep, id, "implied") {
                    return bad(format!("{id} refers to {dep} but that dependency would be cyclic"));
                }
            }
        }

        // disambiguation chain first, in step order
        let mut chain: Vec<String> = b.nodes.values().filter(|q| q.sequence == 0).map(|q| q.id.clone()).collect();
        if wire.ambiguous && chain.is_empty() {
            let q = SubQuestion {
                id: "S0.1".into(),
                text: format!("Clarify what the ambiguous expressions in this question refer to: {query}"),
                kind: SubQuestionKind::Disambiguation,
                depends_on: BTreeSet::new(),
                sequence: 0,
                resolved_answer: None,
            };
            b.nodes.insert(q.id.clone(), q);
            b.repairs.push("added disambiguation node S0.1".into());
            chain.push("S0.1".into());
        }
        sort_ids(&mut chain);
        for pair in chain.windows(2) {
            if !b.adj.get(&pair[0]).is_some_and(|s| s.contains(&pair[1])) && !b.try_edge(&pair[0], &pair[1], "chain") {
                return bad(format!("disambiguation chain {}->{} would be cyclic", pair[0], pair[1]));
            }
        }
        if let Some(last) = chain.last().cloned() {
            let roots: Vec<String> = b
                .nodes
                .values()
                .filter(|q| q.sequence != 0)
                .map(|q| q.id.clone())
                .filter(|id| b.in_degree(id) == 0)
                .collect();
            for r in roots {
                if !b.try_edge(&last, &r, "disambiguation") {
                    return bad(format!("cannot place disambiguation before {r}"));
                }
            }
        }

        let sinks: Vec<String> = b.nodes.keys().filter(|id| b.out_degree(id) == 0).cloned().collect();
        let final_node = match wire.final_node {
            Some(f) if b.nodes.contains_key(&f) => f,
            Some(f) if sinks.len() == 1 => {
                b.repairs.push(format!("final node {f} is unknown; using the only sink"));
                sinks[0].clone()
            }
            None if sinks.len() == 1 => sinks[0].clone(),
            Some(f) => return bad(format!("final node {f} does not exist")),
            None => return bad("plan names no final node and has several sinks".into()),
        };
        if b.nodes[&final_node].kind == SubQuestionKind::Disambiguation && b.nodes.len() > 1 {
            return bad("the final node cannot be a disambiguation step".into());
        }
        let outgoing: Vec<(String, String)> = b.edges.iter().filter(|(a, _)| *a == final_node).cloned().collect();
        for (a, c) in outgoing {
            b.repairs.push(format!("dropped edge {a}->{c}: the final node has no dependents"));
            b.edges.retain(|e| *e != (a.clone(), c.clone()));
            b.adj.get_mut(&a).map(|s| s.remove(&c));
        }
        let dangling: Vec<String> = b
            .nodes
            .keys()
            .filter(|id| **id != final_node && b.out_degree(id) == 0)
            .cloned()
            .collect();
        for d in dangling {
            b.repairs.push(format!("linked dangling {d} to the final node"));
            b.try_edge(&d, &final_node, "linking");
        }

        for (a, c) in &b.edges {
            b.nodes.get_mut(c).expect("edge endpoints checked").depends_on.insert(a.clone());
        }
        let dag = Self {
            query: query.to_string(),
            nodes: b.nodes,
            edges: b.edges,
            final_node,
            ambiguous: wire.ambiguous || !chain.is_empty(),
            repairs: b.repairs,
        };
        dag.validate().map_err(|e| Error::Planning(e.to_string()))?;
        Ok(dag)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Integrity(m));
        if !self.nodes.contains_key(&self.final_node) {
            return bad(format!("final node {} missing", self.final_node));
        }
        for (a, c) in &self.edges {
            if !self.nodes.contains_key(a) || !self.nodes.contains_key(c) || a == c {
                return bad(format!("bad edge {a}->{c}"));
            }
            if *a == self.final_node {
                return bad("final node has dependents".into());
            }
        }
        for q in self.nodes.values() {
            let declared: BTreeSet<String> =
                self.edges.iter().filter(|(_, c)| *c == q.id).map(|(a, _)| a.clone()).collect();
            if declared != q.depends_on || q.text.trim().is_empty() {
                return bad(format!("sub-question {} is inconsistent with the edge list", q.id));
            }
            if (q.kind == SubQuestionKind::Disambiguation) != (q.sequence == 0) {
                return bad(format!("sub-question {} has the wrong sequence for its kind", q.id));
            }
        }
        let schedule = topo_schedule(self)?;
        // every node reaches the final node: walk backwards from it
        let mut seen = BTreeSet::from([self.final_node.as_str()]);
        let mut queue = VecDeque::from([self.final_node.as_str()]);
        while let Some(v) = queue.pop_front() {
            for d in &self.nodes[v].depends_on {
                if seen.insert(d.as_str()) {
                    queue.push_back(d.as_str());
                }
            }
        }
        if seen.len() != self.nodes.len() {
            return bad("some sub-questions do not lead to the final node".into());
        }
        // disambiguation nodes come before every standard root
        let last_dis = schedule
            .waves
            .iter()
            .rposition(|w| w.iter().any(|id| self.nodes[id].sequence == 0));
        let first_std = schedule
            .waves
            .iter()
            .position(|w| w.iter().any(|id| self.nodes[id].sequence != 0));
        if let (Some(l), Some(f)) = (last_dis, first_std) {
            if l >= f {
                return bad("disambiguation does not precede the other sub-questions".into());
            }
        }
        Ok(())
    }

    /// Ids in a deterministic topological order.
    pub fn order(&self) -> Vec<String> {
        topo_schedule(self).map(|s| s.waves.concat()).unwrap_or_default()
    }
}

impl fmt::Display for PlanDag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "query: {}", self.query)?;
        for id in self.order() {
            let q = &self.nodes[&id];
            let deps: Vec<&str> = q.depends_on.iter().map(String::as_str).collect();
            let marker = if id == self.final_node { " (final)" } else { "" };
            write!(f, "{id}{marker}: {}", q.text)?;
            if !deps.is_empty() {
                write!(f, "  <- {}", deps.join(", "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Ask the model for a plan and validate it.
pub fn plan(query: &str, gateway: &Gateway) -> Result<PlanDag> {
    if query.trim().is_empty() {
        return Err(Error::Input("query is empty".into()));
    }
    let req = CompletionRequest::new(PLAN_QUERY)
        .var("query", query.trim())
        .var("max_subquestions", MAX_SUBQUESTIONS.to_string())
        .max_output_tokens(1500);
    let wire: WirePlan = gateway
        .complete_parsed(&req, parse_json::<WirePlan>)
        .map_err(|e| match e {
            Error::Extraction { reason, .. } => Error::Planning(format!("unreadable plan: {reason}")),
            other => other,
        })?;
    PlanDag::from_wire(query.trim(), wire)
}

/// Kahn layering: each wave holds the nodes whose prerequisites all sit in
/// earlier waves; ids within a wave are sorted by sequence then step.
pub fn topo_schedule(dag: &PlanDag) -> Result<Schedule> {
    let mut indeg: BTreeMap<&str, usize> = dag.nodes.keys().map(|k| (k.as_str(), 0)).collect();
    for (_, c) in &dag.edges {
        *indeg
            .get_mut(c.as_str())
            .ok_or_else(|| Error::Integrity(format!("edge to unknown node {c}")))? += 1;
    }
    let mut waves = Vec::new();
    let mut current: Vec<String> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| k.to_string()).collect();
    let mut placed = 0;
    while !current.is_empty() {
        sort_ids(&mut current);
        placed += current.len();
        let mut next = Vec::new();
        for v in &current {
            for (a, c) in &dag.edges {
                if a == v {
                    let d = indeg.get_mut(c.as_str()).expect("counted above");
                    *d -= 1;
                    if *d == 0 {
                        next.push(c.clone());
                    }
                }
            }
        }
        waves.push(std::mem::replace(&mut current, next));
    }
    if placed != dag.nodes.len() {
        return Err(Error::Integrity("plan contains a cycle".into()));
    }
    Ok(Schedule { waves })
}

/// Substitute `[A<seq>.<step>]` placeholders with resolved answers.
pub fn rephrase_with_context(subq: &SubQuestion, resolved: &BTreeMap<String, String>) -> Result<SubQuestion> {
    if let Some(missing) = subq.depends_on.iter().find(|d| !resolved.contains_key(*d)) {
        return Err(Error::Sequencing(format!("{} depends on unresolved {missing}", subq.id)));
    }
    let mut failed = None;
    let text = PLACEHOLDER_RE.replace_all(&subq.text, |c: &regex::Captures| {
        let id = format!("S{}.{}", &c[1], &c[2]);
        match resolved.get(&id) {
            Some(answer) => answer.trim().to_string(),
            None => {
                failed.get_or_insert(id);
                c[0].to_string()
            }
        }
    });
    if let Some(id) = failed {
        return Err(Error::Sequencing(format!("{} refers to {id}, which is not resolved", subq.id)));
    }
    Ok(SubQuestion {
        text: text.into_owned(),
        ..subq.clone()
    })
}
