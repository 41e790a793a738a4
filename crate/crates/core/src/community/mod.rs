//! Multi-level community hierarchy over the knowledge graph.

mod leiden;

pub use leiden::{leiden_partition, modularity, WeightedGraph};

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{truncate_tokens, KnowledgeGraph};
use crate::llm::templates::SUMMARIZE_COMMUNITY;
use crate::llm::{CompletionRequest, Gateway};
use crate::text::normalize_whitespace;

pub const DEFAULT_SCHEDULE: [f64; 3] = [1.0, 0.5, 0.25];
pub const MAX_LEVELS: usize = 3;
const MEMBER_DESCRIPTION_TOKENS: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Community {
    pub id: String,
    pub level: usize,
    /// Entity keys at level 0, child community ids above.
    pub members: Vec<String>,
    pub summary: String,
    pub parent: Option<String>,
}

pub fn community_id(level: usize, index: usize) -> String {
    format!("L{level}C{index}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommunityHierarchy {
    pub levels: Vec<Vec<Community>>,
}

impl CommunityHierarchy {
    pub fn max_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn communities(&self) -> impl Iterator<Item = &Community> {
        self.levels.iter().flatten()
    }

    pub fn get(&self, id: &str) -> Option<&Community> {
        self.communities().find(|c| c.id == id)
    }

    /// Entity keys covered by a community at any level.
    pub fn entity_members(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cid) = stack.pop() {
            if let Some(c) = self.get(&cid) {
                if c.level == 0 {
                    out.extend(c.members.iter().cloned());
                } else {
                    stack.extend(c.members.iter().cloned());
                }
            }
        }
        out
    }

    /// Check partition, parent and connectivity invariants against `kg`.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let fail = |m: String| Err(Error::Integrity(m));
        let mut below: BTreeSet<String> = kg.entities().map(|e| e.key.clone()).collect();
        let index = entity_index(kg);
        let graph = entity_graph(kg, &index)?;
        for (level, comms) in self.levels.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for c in comms {
                if c.level != level || c.members.is_empty() {
                    return fail(format!("community {} is malformed", c.id));
                }
                for m in &c.members {
                    if !below.contains(m) {
                        return fail(format!("community {} has unknown member {m}", c.id));
                    }
                    if !seen.insert(m.clone()) {
                        return fail(format!("member {m} appears twice at level {level}"));
                    }
                    if level > 0 {
                        let child = self.get(m).expect("member checked above");
                        if child.parent.as_deref() != Some(c.id.as_str()) {
                            return fail(format!("parent pointer of {m} disagrees with {}", c.id));
                        }
                    }
                }
                let nodes: Vec<usize> = self.entity_members(&c.id).iter().map(|k| index[k]).collect();
                if !graph.is_connected(&nodes) {
                    return fail(format!("community {} is not connected", c.id));
                }
                let top = level + 1 == self.levels.len();
                if top != c.parent.is_none() {
                    return fail(format!("community {} has an inconsistent parent", c.id));
                }
            }
            if seen != below {
                return fail(format!("level {level} does not cover the level below"));
            }
            below = comms.iter().map(|c| c.id.clone()).collect();
        }
        Ok(())
    }
}

fn entity_index(kg: &KnowledgeGraph) -> BTreeMap<String, usize> {
    kg.entities()
        .enumerate()
        .map(|(i, e)| (e.key.clone(), i))
        .collect()
}

fn entity_graph(kg: &KnowledgeGraph, index: &BTreeMap<String, usize>) -> Result<WeightedGraph> {
    let edges: Vec<(usize, usize, f64)> = kg
        .relations()
        .map(|r| (index[&r.src], index[&r.dst], r.weight))
        .collect();
    WeightedGraph::from_edges(index.len(), &edges)
}

/// Group node indices by partition label; groups ordered by their smallest node.
fn groups(partition: &[usize]) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, &c) in partition.iter().enumerate() {
        by_label.entry(c).or_default().push(v);
    }
    let mut out: Vec<Vec<usize>> = by_label.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Leiden over entities for level 0, then over contracted graphs while the
/// schedule lasts and the partition keeps coarsening.
pub fn build_hierarchy(kg: &KnowledgeGraph, schedule: &[f64], seed: u64) -> Result<CommunityHierarchy> {
    if kg.is_empty() {
        return Err(Error::Input("cannot build communities over an empty graph".into()));
    }
    if schedule.is_empty() || schedule.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("invalid resolution schedule {schedule:?}")));
    }
    let index = entity_index(kg);
    let keys: Vec<&String> = index.keys().collect();
    let mut graph = entity_graph(kg, &index)?;
    let mut levels: Vec<Vec<Community>> = Vec::new();

    for (level, &resolution) in schedule.iter().take(MAX_LEVELS).enumerate() {
        if levels.last().is_some_and(|l| l.len() == 1) {
            break;
        }
        let partition = leiden_partition(&graph, resolution, seed.wrapping_add(level as u64));
        let grouped = groups(&partition);
        if level > 0 && grouped.len() == graph.node_count() {
            break;
        }
        let mut assign = vec![0; graph.node_count()];
        let mut comms = Vec::with_capacity(grouped.len());
        for (i, nodes) in grouped.iter().enumerate() {
            let id = community_id(level, i);
            for &v in nodes {
                assign[v] = i;
            }
            let mut members: Vec<String> = match levels.last_mut() {
                None => nodes.iter().map(|&v| keys[v].clone()).collect(),
                Some(prev) => nodes
                    .iter()
                    .map(|&v| {
                        prev[v].parent = Some(id.clone());
                        prev[v].id.clone()
                    })
                    .collect(),
            };
            if level == 0 {
                members.sort();
            }
            comms.push(Community {
                id,
                level,
                members,
                summary: String::new(),
                parent: None,
            });
        }
        graph = graph.contract(&assign, grouped.len());
        levels.push(comms);
    }
    Ok(CommunityHierarchy { levels })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub summarized: usize,
    /// Communities whose summary fell back to member names.
    pub fallbacks: Vec<String>,
}

fn level0_prompt(c: &Community, kg: &KnowledgeGraph) -> (String, String) {
    let mut members: Vec<(String, String)> = c
        .members
        .iter()
        .filter_map(|k| kg.entity(k))
        .map(|e| {
            let desc = truncate_tokens(&normalize_whitespace(&e.description), MEMBER_DESCRIPTION_TOKENS);
            (e.display_name.clone(), desc)
        })
        .collect();
    members.sort();
    let member_lines: Vec<String> = members.iter().map(|(n, d)| format!("- {n}: {d}")).collect();
    let inside: BTreeSet<&str> = c.members.iter().map(String::as_str).collect();
    let name = |k: &str| kg.entity(k).map_or(k.to_string(), |e| e.display_name.clone());
    let relation_lines: Vec<String> = kg
        .relations()
        .filter(|r| inside.contains(r.src.as_str()) && inside.contains(r.dst.as_str()))
        .map(|r| {
            format!(
                "- {} {} {}: {}",
                name(&r.src),
                r.label,
                name(&r.dst),
                normalize_whitespace(&r.description)
            )
        })
        .collect();
    (member_lines.join("\n"), relation_lines.join("\n"))
}

fn fallback_summary(c: &Community, h: &CommunityHierarchy, kg: &KnowledgeGraph) -> String {
    let mut names: Vec<String> = if c.level == 0 {
        c.members
            .iter()
            .map(|k| kg.entity(k).map_or(k.clone(), |e| e.display_name.clone()))
            .collect()
    } else {
        h.entity_members(&c.id)
            .iter()
            .map(|k| kg.entity(k).map_or(k.clone(), |e| e.display_name.clone()))
            .collect()
    };
    names.sort();
    names.join(", ")
}

/// Fill every summary bottom-up, one level at a time.
pub fn summarize(h: &mut CommunityHierarchy, kg: &KnowledgeGraph, gateway: &Gateway) -> SummaryReport {
    let mut report = SummaryReport::default();
    for level in 0..h.levels.len() {
        let snapshot = &*h;
        let results: Vec<(String, bool)> = snapshot.levels[level]
            .par_iter()
            .map(|c| {
                if level == 0 && c.members.len() == 1 {
                    if let Some(e) = kg.entity(&c.members[0]) {
                        let desc = normalize_whitespace(&e.description);
                        let text = if desc.is_empty() { e.display_name.clone() } else { desc };
                        return (text, true);
                    }
                }
                let (members, relations, kind) = if level == 0 {
                    let (m, r) = level0_prompt(c, kg);
                    (m, r, "entities")
                } else {
                    let lines: Vec<String> = c
                        .members
                        .iter()
                        .filter_map(|id| snapshot.get(id))
                        .map(|child| format!("- {}: {}", child.id, normalize_whitespace(&child.summary)))
                        .collect();
                    (lines.join("\n"), String::new(), "communities")
                };
                let req = CompletionRequest::new(SUMMARIZE_COMMUNITY)
                    .var("community_id", c.id.clone())
                    .var("level", level.to_string())
                    .var("kind", kind)
                    .var("members", members)
                    .var("relations", if relations.is_empty() { "(none)".into() } else { relations });
                match gateway.complete(&req) {
                    Ok(text) if !text.trim().is_empty() => (text.trim().to_string(), true),
                    Ok(_) => {
                        warn!("empty summary for {}", c.id);
                        (fallback_summary(c, snapshot, kg), false)
                    }
                    Err(e) => {
                        warn!("summary for {} failed: {e}", c.id);
                        (fallback_summary(c, snapshot, kg), false)
                    }
                }
            })
            .collect();
        for (c, (summary, ok)) in h.levels[level].iter_mut().zip(results) {
            c.summary = summary;
            report.summarized += 1;
            if !ok {
                report.fallbacks.push(c.id.clone());
            }
        }
    }
    report
}
