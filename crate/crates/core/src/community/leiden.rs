//! Leiden community detection with the modularity quality function.
//!
//! Three phases repeat until the partition is stable: fast local moving,
//! refinement (nodes only merge into well-connected sub-communities of their
//! community, which keeps every community connected), and aggregation of the
//! refined partition. Node visiting order comes from a seeded ChaCha stream so
//! a (graph, resolution, seed) triple always yields the same partition.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const GAIN_EPS: f64 = 1e-12;
const MAX_PASSES: usize = 64;

/// Undirected weighted graph. Self-loops are kept apart from the adjacency
/// lists and count twice towards a node's degree.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
}

impl WeightedGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        let mut self_loops = vec![0.0; n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Input(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Input(format!("edge ({u}, {v}) has non-positive weight {w}")));
            }
            if u == v {
                self_loops[u] += w;
            } else {
                *maps[u].entry(v).or_default() += w;
                *maps[v].entry(u).or_default() += w;
            }
        }
        Ok(Self {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adj[v]
    }

    pub fn self_loop(&self, v: usize) -> f64 {
        self.self_loops[v]
    }

    pub fn degree(&self, v: usize) -> f64 {
        self.adj[v].iter().map(|(_, w)| w).sum::<f64>() + 2.0 * self.self_loops[v]
    }

    /// Sum of degrees, i.e. twice the total edge weight.
    pub fn total_degree(&self) -> f64 {
        (0..self.node_count()).map(|v| self.degree(v)).sum()
    }

    /// Contract nodes by `assign` (values in `0..k`); internal weight
    /// becomes self-loops and parallel edges are summed.
    pub fn contract(&self, assign: &[usize], k: usize) -> Self {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        let mut self_loops = vec![0.0; k];
        for v in 0..self.node_count() {
            let cv = assign[v];
            self_loops[cv] += self.self_loops[v];
            for &(u, w) in &self.adj[v] {
                if v < u {
                    let cu = assign[u];
                    if cu == cv {
                        self_loops[cv] += w;
                    } else {
                        *maps[cv].entry(cu).or_default() += w;
                        *maps[cu].entry(cv).or_default() += w;
                    }
                }
            }
        }
        Self {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
        }
    }

    /// True when `nodes` induce a connected subgraph.
    pub fn is_connected(&self, nodes: &[usize]) -> bool {
        if nodes.len() <= 1 {
            return true;
        }
        let inside: std::collections::BTreeSet<usize> = nodes.iter().copied().collect();
        let mut seen = std::collections::BTreeSet::from([nodes[0]]);
        let mut queue = VecDeque::from([nodes[0]]);
        while let Some(v) = queue.pop_front() {
            for &(u, _) in &self.adj[v] {
                if inside.contains(&u) && seen.insert(u) {
                    queue.push_back(u);
                }
            }
        }
        seen.len() == inside.len()
    }
}

/// Modularity of `partition` at `resolution`; 0 for an edgeless graph.
pub fn modularity(graph: &WeightedGraph, partition: &[usize], resolution: f64) -> f64 {
    let m2 = graph.total_degree();
    if m2 == 0.0 {
        return 0.0;
    }
    let k = partition.iter().copied().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for v in 0..graph.node_count() {
        let c = partition[v];
        tot[c] += graph.degree(v);
        internal[c] += 2.0 * graph.self_loop(v);
        for &(u, w) in graph.neighbors(v) {
            if partition[u] == c {
                internal[c] += w;
            }
        }
    }
    internal
        .iter()
        .zip(&tot)
        .map(|(i, t)| i - resolution * t * t / m2)
        .sum::<f64>()
        / m2
}

/// Relabel communities `0..k` by first appearance; returns `k`.
fn renumber(partition: &mut [usize]) -> usize {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    for c in partition.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

struct Scratch {
    weight: Vec<f64>,
    touched: Vec<usize>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            weight: vec![0.0; n],
            touched: Vec::new(),
        }
    }

    fn add(&mut self, c: usize, w: f64) {
        if self.weight[c] == 0.0 && !self.touched.contains(&c) {
            self.touched.push(c);
        }
        self.weight[c] += w;
    }

    fn clear(&mut self) {
        for &c in &self.touched {
            self.weight[c] = 0.0;
        }
        self.touched.clear();
    }
}

fn move_nodes_fast(
    g: &WeightedGraph,
    part: &mut [usize],
    gamma: f64,
    m2: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let n = g.node_count();
    let degree: Vec<f64> = (0..n).map(|v| g.degree(v)).collect();
    let mut tot = vec![0.0; n];
    let mut size = vec![0usize; n];
    for v in 0..n {
        tot[part[v]] += degree[v];
        size[part[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| size[c] == 0).rev().collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut scratch = Scratch::new(n);
    let mut moved = false;

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let cur = part[v];
        let kv = degree[v];
        for &(u, w) in g.neighbors(v) {
            scratch.add(part[u], w);
        }
        tot[cur] -= kv;
        size[cur] -= 1;
        if size[cur] == 0 {
            empty.push(cur);
        }

        let mut best = cur;
        let mut best_gain = scratch.weight[cur] - gamma * kv * tot[cur] / m2;
        for &c in &scratch.touched {
            let gain = scratch.weight[c] - gamma * kv * tot[c] / m2;
            if gain > best_gain + GAIN_EPS {
                best = c;
                best_gain = gain;
            }
        }
        if best_gain < -GAIN_EPS {
            // an empty community (gain 0) beats every occupied option
            best = *empty.last().expect("an empty community always exists here");
        }
        scratch.clear();

        if size[best] == 0 {
            let pos = empty.iter().rposition(|&c| c == best).unwrap();
            empty.remove(pos);
        }
        tot[best] += kv;
        size[best] += 1;
        part[v] = best;

        if best != cur {
            moved = true;
            for &(u, _) in g.neighbors(v) {
                if !queued[u] && part[u] != best {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    moved
}

fn refine(
    g: &WeightedGraph,
    part: &[usize],
    gamma: f64,
    m2: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = g.node_count();
    let degree: Vec<f64> = (0..n).map(|v| g.degree(v)).collect();
    let mut comm_tot = vec![0.0; n];
    for v in 0..n {
        comm_tot[part[v]] += degree[v];
    }
    // w(v, C(v) - v)
    let ext: Vec<f64> = (0..n)
        .map(|v| {
            g.neighbors(v)
                .iter()
                .filter(|(u, _)| part[*u] == part[v])
                .map(|(_, w)| w)
                .sum()
        })
        .collect();

    let mut refined: Vec<usize> = (0..n).collect();
    let mut ref_tot = degree.clone();
    let mut ref_ext = ext.clone();
    let mut ref_size = vec![1usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut scratch = Scratch::new(n);

    for v in order {
        if ref_size[refined[v]] != 1 {
            continue;
        }
        let c = part[v];
        let kv = degree[v];
        if ext[v] < gamma * kv * (comm_tot[c] - kv) / m2 {
            continue;
        }
        for &(u, w) in g.neighbors(v) {
            if part[u] == c {
                scratch.add(refined[u], w);
            }
        }
        let own = refined[v];
        let mut best: Option<(usize, f64)> = None;
        for &t in &scratch.touched {
            if t == own {
                continue;
            }
            let well_connected = ref_ext[t] >= gamma * ref_tot[t] * (comm_tot[c] - ref_tot[t]) / m2;
            if !well_connected {
                continue;
            }
            let gain = scratch.weight[t] - gamma * kv * ref_tot[t] / m2;
            if gain >= 0.0 && best.is_none_or(|(_, g0)| gain > g0 + GAIN_EPS) {
                best = Some((t, gain));
            }
        }
        if let Some((t, _)) = best {
            let w_vt = scratch.weight[t];
            ref_ext[t] = ref_ext[t] + ext[v] - 2.0 * w_vt;
            ref_tot[t] += kv;
            ref_size[t] += 1;
            ref_tot[own] = 0.0;
            ref_size[own] = 0;
            refined[v] = t;
        }
        scratch.clear();
    }
    refined
}

/// Split any community whose induced subgraph is disconnected.
fn split_disconnected(g: &WeightedGraph, part: &mut [usize]) {
    let n = g.node_count();
    let mut next = part.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    let mut first_component: BTreeMap<usize, bool> = BTreeMap::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let c = part[start];
        let relabel = first_component.insert(c, true).is_some();
        let label = if relabel {
            next += 1;
            next - 1
        } else {
            c
        };
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            part[v] = label;
            for &(u, _) in g.neighbors(v) {
                if !seen[u] && part[u] == c {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
}

/// Partition `graph` into communities; element `i` is node `i`'s community,
/// numbered `0..k` by first appearance.
pub fn leiden_partition(graph: &WeightedGraph, resolution: f64, seed: u64) -> Vec<usize> {
    let n = graph.node_count();
    if n == 0 {
        return Vec::new();
    }
    let m2 = graph.total_degree();
    if m2 == 0.0 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = graph.clone();
    let mut membership: Vec<usize> = (0..n).collect();
    let mut part: Vec<usize> = (0..n).collect();

    for _ in 0..MAX_PASSES {
        move_nodes_fast(&current, &mut part, resolution, m2, &mut rng);
        let k = renumber(&mut part);
        if k == current.node_count() {
            break;
        }
        let mut refined = refine(&current, &part, resolution, m2, &mut rng);
        let k_ref = renumber(&mut refined);
        let mut next_part = vec![0; k_ref];
        for v in 0..current.node_count() {
            next_part[refined[v]] = part[v];
        }
        for m in membership.iter_mut() {
            *m = refined[*m];
        }
        let stalled = k_ref == current.node_count();
        current = current.contract(&refined, k_ref);
        part = next_part;
        if stalled {
            break;
        }
    }

    let mut result: Vec<usize> = membership.iter().map(|&m| part[m]).collect();
    split_disconnected(graph, &mut result);
    renumber(&mut result);
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_cliques() -> WeightedGraph {
        let mut edges = Vec::new();
        for base in [0, 4] {
            for i in 0..4 {
                for j in i + 1..4 {
                    edges.push((base + i, base + j, 1.0));
                }
            }
        }
        edges.push((3, 4, 1.0));
        WeightedGraph::from_edges(8, &edges).unwrap()
    }

    #[test]
    fn modularity_reference_value() {
        // two triangles joined by one edge; clique split has Q = 5/14
        let g = WeightedGraph::from_edges(
            6,
            &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0), (2, 3, 1.0)],
        )
        .unwrap();
        let q = modularity(&g, &[0, 0, 0, 1, 1, 1], 1.0);
        assert!((q - 5.0 / 14.0).abs() < 1e-12);
        assert!(modularity(&g, &[0; 6], 1.0).abs() < 1e-12);
    }

    #[test]
    fn contraction_preserves_modularity() {
        let g = two_cliques();
        let part = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let c = g.contract(&part, 2);
        assert!((c.total_degree() - g.total_degree()).abs() < 1e-12);
        for gamma in [1.0, 0.5, 0.1] {
            let merged = modularity(&c, &[0, 0], gamma);
            let direct = modularity(&g, &[0; 8], gamma);
            assert!((merged - direct).abs() < 1e-12);
            let split = modularity(&c, &[0, 1], gamma);
            assert!((split - modularity(&g, &part, gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_and_edgeless() {
        let g = WeightedGraph::from_edges(1, &[]).unwrap();
        assert_eq!(leiden_partition(&g, 1.0, 7), vec![0]);
        let g = WeightedGraph::from_edges(4, &[]).unwrap();
        assert_eq!(leiden_partition(&g, 1.0, 7), vec![0, 1, 2, 3]);
    }

    #[test]
    fn isolated_nodes_stay_singletons() {
        let g = WeightedGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let p = leiden_partition(&g, 1.0, 1);
        assert_eq!(p[0], p[1]);
        assert_eq!(p[1], p[2]);
        assert_ne!(p[3], p[4]);
        assert_ne!(p[3], p[0]);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(WeightedGraph::from_edges(2, &[(0, 1, 0.0)]).is_err());
        assert!(WeightedGraph::from_edges(2, &[(0, 1, -1.0)]).is_err());
        assert!(WeightedGraph::from_edges(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn split_disconnected_separates_components() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let mut p = vec![0, 0, 0, 0];
        split_disconnected(&g, &mut p);
        renumber(&mut p);
        assert_eq!(p, vec![0, 0, 1, 1]);
    }
}
