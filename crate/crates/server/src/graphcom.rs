//! Global graph combination and cross-party marginal selection.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use vertimrf_core::data::{Marginal, Schema};
use vertimrf_core::mrf::{self, greedy_edge_selection, AttributeGraph, Triangulated};

use crate::estimate::MarginalEstimator;
use crate::{ServerConfig, ServerError, ServerState};

#[derive(Debug, Clone)]
pub struct GraphComOutcome {
    pub graph: AttributeGraph,
    pub triangulated: Triangulated,
    /// Cross edges actually added, with their estimated scores.
    pub added_edges: Vec<(usize, usize, f64)>,
    /// Every cross pair's estimated score, for the run report.
    pub scores: Vec<(usize, usize, f64)>,
}

/// Combines the disjoint local graphs and greedily links cross-party pairs
/// in descending order of R-scores estimated over the encoded attributes,
/// re-triangulating and enforcing the clique-domain cap after each add.
pub fn graph_com(state: &ServerState, config: &ServerConfig) -> Result<GraphComOutcome, ServerError> {
    let schema = &state.schema;
    let d = schema.attribute_count();
    let mut base = AttributeGraph::for_schema(schema);
    for view in &state.locals {
        // Local graphs arrive in global ids inside the messages; the view
        // keeps local indices, so translate back.
        for (a, b) in view.model.triangulated().graph.edges() {
            base.add_edge(view.attr_ids[a], view.attr_ids[b]);
        }
    }

    let mut scores = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            if state.party_of[a] == state.party_of[b] {
                continue;
            }
            let marginal = Marginal::pair(a, b)?;
            let est = state.estimate(&marginal)?;
            let mut throwaway = ChaCha8Rng::seed_from_u64(0);
            let score = if est.total() > 0.0 {
                mrf::r_score(&est, state.n_hat.max(1.0), 0.0, schema, &mut throwaway)?
            } else {
                0.0
            };
            scores.push((a, b, score));
        }
    }
    let mut ranked = scores.clone();
    ranked.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (x.0, x.1).cmp(&(y.0, y.1)))
    });
    let pairs: Vec<(usize, usize)> = ranked.iter().map(|&(a, b, _)| (a, b)).collect();
    let (graph, added) = greedy_edge_selection(&base, &pairs, config.tau, schema);
    let added_edges = added
        .iter()
        .map(|&(a, b)| {
            let s = scores
                .iter()
                .find(|&&(x, y, _)| (x, y) == (a, b))
                .map(|&(_, _, s)| s)
                .unwrap_or(0.0);
            (a, b, s)
        })
        .collect();
    let triangulated = mrf::triangulate(&graph);
    Ok(GraphComOutcome {
        graph,
        triangulated,
        added_edges,
        scores,
    })
}

/// Cross-party marginals from the triangulated cliques: spans at least two
/// parties, arity capped, and average cell count n_hat / prod(u) at least
/// d_c. Two-way marginals come first.
pub fn select_cross_marginals(
    tri: &Triangulated,
    n_hat: f64,
    d_c: f64,
    party_of: &[u32],
    schema: &Schema,
    max_arity: usize,
) -> Result<Vec<Marginal>, ServerError> {
    let mut selected = std::collections::BTreeSet::new();
    for clique in &tri.cliques {
        let k = clique.len();
        if k < 2 {
            continue;
        }
        for mask in 1u32..(1 << k.min(20)) {
            if (mask.count_ones() as usize) < 2 || mask.count_ones() as usize > max_arity {
                continue;
            }
            let subset: Vec<usize> = clique
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &a)| a)
                .collect();
            let parties: std::collections::BTreeSet<u32> =
                subset.iter().map(|&a| party_of[a]).collect();
            if parties.len() < 2 {
                continue;
            }
            let m = Marginal::new(subset)?;
            let cells = m.cell_count(schema)? as f64;
            if n_hat / cells >= d_c {
                selected.insert(m);
            }
        }
    }
    let mut out: Vec<Marginal> = selected.into_iter().collect();
    out.sort_by_key(|m| (m.arity(), m.attributes().to_vec()));
    Ok(out)
}
