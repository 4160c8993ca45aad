//! Undirected attribute graphs, min-fill triangulation, maximal clique
//! enumeration and junction forests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Schema;

/// Simple undirected graph over attribute indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGraph {
    adj: BTreeMap<usize, BTreeSet<usize>>,
}

impl AttributeGraph {
    pub fn new(nodes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            adj: nodes.into_iter().map(|n| (n, BTreeSet::new())).collect(),
        }
    }

    /// Graph with one node per schema attribute and no edges.
    pub fn for_schema(schema: &Schema) -> Self {
        Self::new(0..schema.attribute_count())
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.adj.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn contains_node(&self, v: usize) -> bool {
        self.adj.contains_key(&v)
    }

    pub fn add_node(&mut self, v: usize) {
        self.adj.entry(v).or_default();
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        self.add_node(a);
        self.add_node(b);
        self.adj.get_mut(&a).unwrap().insert(b);
        self.adj.get_mut(&b).unwrap().insert(a);
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) {
        if let Some(s) = self.adj.get_mut(&a) {
            s.remove(&b);
        }
        if let Some(s) = self.adj.get_mut(&b) {
            s.remove(&a);
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj.get(&v).into_iter().flatten().copied()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (&a, nbrs) in &self.adj {
            for &b in nbrs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Union of node-disjoint graphs.
    pub fn union(graphs: &[AttributeGraph]) -> AttributeGraph {
        let mut out = AttributeGraph {
            adj: BTreeMap::new(),
        };
        for g in graphs {
            for (&v, nbrs) in &g.adj {
                out.adj.entry(v).or_default().extend(nbrs.iter().copied());
            }
        }
        out
    }
}

/// A chordal completion with its maximal cliques and junction forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangulated {
    pub graph: AttributeGraph,
    /// Maximal cliques, each sorted ascending; deterministic order.
    pub cliques: Vec<Vec<usize>>,
    /// Junction forest edges (clique index, clique index, separator).
    pub tree_edges: Vec<(usize, usize, Vec<usize>)>,
}

impl Triangulated {
    /// Index of some clique containing all of `attrs`, if any.
    pub fn containing_clique(&self, attrs: &[usize]) -> Option<usize> {
        self.cliques
            .iter()
            .position(|c| attrs.iter().all(|a| c.binary_search(a).is_ok()))
    }

    /// Running-intersection check: for every attribute the cliques holding
    /// it induce a connected subforest.
    pub fn running_intersection_holds(&self) -> bool {
        let mut nbrs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(a, b, _) in &self.tree_edges {
            nbrs.entry(a).or_default().push(b);
            nbrs.entry(b).or_default().push(a);
        }
        let attrs: BTreeSet<usize> = self.cliques.iter().flatten().copied().collect();
        for attr in attrs {
            let holding: Vec<usize> = (0..self.cliques.len())
                .filter(|&i| self.cliques[i].binary_search(&attr).is_ok())
                .collect();
            if holding.is_empty() {
                continue;
            }
            // BFS within cliques that hold the attribute.
            let target: BTreeSet<usize> = holding.iter().copied().collect();
            let mut seen = BTreeSet::from([holding[0]]);
            let mut queue = vec![holding[0]];
            while let Some(c) = queue.pop() {
                for &n in nbrs.get(&c).into_iter().flatten() {
                    if target.contains(&n) && seen.insert(n) {
                        queue.push(n);
                    }
                }
            }
            if seen.len() != holding.len() {
                return false;
            }
        }
        true
    }
}

/// Chordal completion by min-fill elimination, maximal cliques from the
/// elimination order, and a maximum-weight spanning forest over separator
/// sizes as the junction forest.
pub fn triangulate(input: &AttributeGraph) -> Triangulated {
    let mut filled = input.clone();
    let mut work = input.clone();
    let mut candidates: Vec<Vec<usize>> = Vec::new();

    let mut remaining: BTreeSet<usize> = work.nodes().collect();
    while let Some(v) = pick_min_fill(&work, &remaining) {
        let nbrs: Vec<usize> = work
            .neighbors(v)
            .filter(|n| remaining.contains(n))
            .collect();
        // The eliminated node plus its (now connected) neighborhood.
        let mut clique: Vec<usize> = nbrs.clone();
        clique.push(v);
        clique.sort_unstable();
        candidates.push(clique);
        for i in 0..nbrs.len() {
            for j in i + 1..nbrs.len() {
                if !work.has_edge(nbrs[i], nbrs[j]) {
                    work.add_edge(nbrs[i], nbrs[j]);
                    filled.add_edge(nbrs[i], nbrs[j]);
                }
            }
        }
        for &n in &nbrs {
            work.remove_edge(v, n);
        }
        remaining.remove(&v);
    }

    // Keep maximal candidates only.
    let mut cliques: Vec<Vec<usize>> = Vec::new();
    candidates.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    for cand in candidates {
        let contained = cliques
            .iter()
            .any(|c| cand.iter().all(|x| c.binary_search(x).is_ok()));
        if !contained {
            cliques.push(cand);
        }
    }
    cliques.sort();

    // Kruskal over separator sizes; zero-weight pairs stay disconnected.
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..cliques.len() {
        for j in i + 1..cliques.len() {
            let w = intersect_sorted(&cliques[i], &cliques[j]).len();
            if w > 0 {
                pairs.push((w, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
    let mut parent: Vec<usize> = (0..cliques.len()).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree_edges = Vec::new();
    for (_, i, j) in pairs {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree_edges.push((i, j, intersect_sorted(&cliques[i], &cliques[j])));
        }
    }

    Triangulated {
        graph: filled,
        cliques,
        tree_edges,
    }
}

fn pick_min_fill(work: &AttributeGraph, remaining: &BTreeSet<usize>) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None; // (fill, node)
    for &v in remaining {
        let nbrs: Vec<usize> = work
            .neighbors(v)
            .filter(|n| remaining.contains(n))
            .collect();
        let mut fill = 0usize;
        for i in 0..nbrs.len() {
            for j in i + 1..nbrs.len() {
                if !work.has_edge(nbrs[i], nbrs[j]) {
                    fill += 1;
                }
            }
        }
        match best {
            Some((bf, bv)) if (fill, v) >= (bf, bv) => {}
            _ => best = Some((fill, v)),
        }
    }
    best.map(|(_, v)| v)
}

fn intersect_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter()
        .filter(|x| b.binary_search(x).is_ok())
        .copied()
        .collect()
}

/// Largest clique cell space of the triangulated graph; isolated nodes
/// count as singleton cliques.
pub fn max_clique_domain(tri: &Triangulated, schema: &Schema) -> usize {
    tri.cliques
        .iter()
        .map(|c| c.iter().map(|&a| schema.domain_size(a)).product::<usize>())
        .max()
        .unwrap_or(1)
}

/// Greedily adds candidate edges in the given order, keeping each only if
/// the re-triangulated graph stays within the clique-domain threshold.
/// Passes repeat until none can be added, since min-fill is a heuristic.
pub fn greedy_edge_selection(
    base: &AttributeGraph,
    ranked_pairs: &[(usize, usize)],
    tau: usize,
    schema: &Schema,
) -> (AttributeGraph, Vec<(usize, usize)>) {
    let mut graph = base.clone();
    let mut added = Vec::new();
    let mut pending: Vec<(usize, usize)> = ranked_pairs
        .iter()
        .copied()
        .filter(|&(a, b)| !graph.has_edge(a, b) && a != b)
        .collect();
    loop {
        let mut progressed = false;
        let mut still_pending = Vec::new();
        for (a, b) in pending {
            if graph.has_edge(a, b) {
                continue;
            }
            graph.add_edge(a, b);
            let tri = triangulate(&graph);
            if max_clique_domain(&tri, schema) <= tau {
                added.push((a, b));
                progressed = true;
            } else {
                graph.remove_edge(a, b);
                still_pending.push((a, b));
            }
        }
        pending = still_pending;
        if !progressed || pending.is_empty() {
            break;
        }
    }
    (graph, added)
}
