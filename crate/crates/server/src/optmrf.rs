//! Global model construction and refinement: knowledge transfer from the
//! local models, cross-marginal optimization rounds and synthesis.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vertimrf_core::data::{ContingencyHistogram, Dataset, HistKind, Marginal};
use vertimrf_core::mrf::{AttributeGraph, FitOptions, FitReport, MrfModel};

use crate::consistency::enforce_consistency;
use crate::estimate::MarginalEstimator;
use crate::{ServerConfig, ServerError, ServerState};

/// Initializes the global model: the marginal set is the union of the
/// local sets and the targets are the local models' own inferences, so all
/// the knowledge the parties paid for transfers into the global MRF for
/// free.
pub fn init_mrf(
    state: &ServerState,
    graph: &AttributeGraph,
) -> Result<
    (
        MrfModel,
        FitReport,
        BTreeMap<Marginal, ContingencyHistogram>,
    ),
    ServerError,
> {
    let mut targets: BTreeMap<Marginal, ContingencyHistogram> = BTreeMap::new();
    let mut marginals: Vec<Marginal> = Vec::new();
    for view in &state.locals {
        for local_m in view.model.marginals() {
            let global = local_m.remap(&view.attr_ids)?;
            let cells = view.infer_global(&global)?;
            let hist = ContingencyHistogram::new(
                global.clone(),
                cells,
                HistKind::Distribution,
                &state.schema,
            )?;
            if !marginals.contains(&global) {
                marginals.push(global.clone());
                targets.insert(global, hist);
            }
        }
    }
    marginals.sort();
    let mut model = MrfModel::new(state.schema.clone(), graph, marginals)?;
    let report = model.fit_theta(&targets, FitOptions::default())?;
    Ok((model, report, targets))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptRoundReport {
    pub round: usize,
    pub batch: Vec<Vec<usize>>,
    /// L1 gap of each batch marginal before the round's refit.
    pub l1_before: Vec<f64>,
    pub added: Vec<Vec<usize>>,
    /// Summed L1 over the added marginals after the refit.
    pub l1_after_added: f64,
    pub reverted: bool,
}

/// Optimization rounds: sample cross-party marginals, estimate them over
/// the encodings, enforce consistency against the local attribute
/// marginals, and refit including the worst-inferred half. A round whose
/// refit worsens the error on the marginals it added is rolled back.
/// Post-processing only; no budget is spent here.
pub fn opt_mrf(
    model: &mut MrfModel,
    cross: &[Marginal],
    state: &mut ServerState,
    mut targets: BTreeMap<Marginal, ContingencyHistogram>,
    config: &ServerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<OptRoundReport>, ServerError> {
    let mut reports = Vec::new();
    if cross.is_empty() || config.opt_rounds == 0 {
        return Ok(reports);
    }
    for round in 0..config.opt_rounds {
        // Deterministic batch sample without replacement.
        let mut pool: Vec<&Marginal> = cross
            .iter()
            .filter(|m| !targets.contains_key(*m))
            .collect();
        if pool.is_empty() {
            break;
        }
        for i in (1..pool.len()).rev() {
            let j = (rng.random::<u64>() as usize) % (i + 1);
            pool.swap(i, j);
        }
        pool.truncate(config.opt_batch.max(1));
        pool.sort();

        let mut ranked: Vec<(f64, Marginal, ContingencyHistogram)> = Vec::new();
        let mut l1_before = Vec::new();
        let mut batch_attrs = Vec::new();
        for m in &pool {
            let est = state.estimate(m)?;
            if est.total() <= 0.0 {
                continue; // degenerate estimate, nothing to learn from
            }
            let outcome = enforce_consistency(
                &est,
                &state.attr_marginals,
                config.consistency_iterations,
                config.consistency_tolerance,
                state.n_hat,
                &state.schema,
            )?;
            // Consistency also refreshes the attribute marginals used by
            // later rounds and, when present, their fit targets.
            for (attr, dist) in &outcome.attr_marginals {
                state.attr_marginals.insert(*attr, dist.clone());
                let single = Marginal::single(*attr);
                if targets.contains_key(&single) {
                    let hist = ContingencyHistogram::new(
                        single.clone(),
                        dist.clone(),
                        HistKind::Distribution,
                        &state.schema,
                    )?;
                    targets.insert(single, hist);
                }
            }
            let inferred = model.infer_marginal(m)?;
            let consistent_dist = outcome
                .histogram
                .to_distribution(&state.schema)
                .map_err(ServerError::Data)?;
            let l1: f64 = inferred
                .cells()
                .iter()
                .zip(consistent_dist.cells())
                .map(|(a, b)| (a - b).abs())
                .sum();
            l1_before.push(l1);
            batch_attrs.push(m.attributes().to_vec());
            ranked.push((l1, (*m).clone(), outcome.histogram));
        }
        if ranked.is_empty() {
            reports.push(OptRoundReport {
                round,
                batch: batch_attrs,
                l1_before,
                added: vec![],
                l1_after_added: 0.0,
                reverted: false,
            });
            continue;
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        let take = ranked.len().div_ceil(2);
        let worst: Vec<(f64, Marginal, ContingencyHistogram)> = ranked
            .into_iter()
            .take(take)
            .filter(|(l1, _, _)| *l1 > config.add_threshold)
            .collect();
        if worst.is_empty() {
            reports.push(OptRoundReport {
                round,
                batch: batch_attrs,
                l1_before,
                added: vec![],
                l1_after_added: 0.0,
                reverted: false,
            });
            continue;
        }
        let snapshot = model.clone();
        let before_sum: f64 = worst.iter().map(|(l1, _, _)| l1).sum();
        let mut added = Vec::new();
        for (_, m, hist) in &worst {
            targets.insert(m.clone(), hist.clone());
            added.push(m.clone());
        }
        model.add_marginals(added.clone())?;
        model.fit_theta(&targets, FitOptions::default())?;
        let mut after_sum = 0.0;
        for (_, m, hist) in &worst {
            let inferred = model.infer_marginal(m)?;
            let dist = hist.to_distribution(&state.schema)?;
            after_sum += inferred
                .cells()
                .iter()
                .zip(dist.cells())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        let reverted = after_sum > before_sum + 1e-9;
        if reverted {
            *model = snapshot;
            for m in &added {
                targets.remove(m);
            }
        }
        reports.push(OptRoundReport {
            round,
            batch: batch_attrs,
            l1_before,
            added: added.iter().map(|m| m.attributes().to_vec()).collect(),
            l1_after_added: if reverted { before_sum } else { after_sum },
            reverted,
        });
    }
    Ok(reports)
}

/// Samples round(max(n_hat, 0)) rows from the optimized model.
pub fn synthesize(
    model: &MrfModel,
    n_hat: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, ServerError> {
    let count = n_hat.max(0.0).round() as usize;
    model.sample(count, rng).map_err(ServerError::Mrf)
}
