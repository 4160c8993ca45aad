//! Local DP MRF construction over a party's own attributes: noisy
//! pairwise scores pick the graph, theta-useful clique subsets form the
//! candidate pool, each attribute gets its best pair, and the model is
//! fitted against Gaussian-noised measurements with a fixed number of
//! refinement rounds.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vertimrf_core::data::{
    compute_histogram, ContingencyHistogram, Dataset, HistKind, Marginal,
};
use vertimrf_core::mrf::{
    self, greedy_edge_selection, AttributeGraph, FitOptions, MrfModel, Triangulated,
};
use vertimrf_core::privacy::{self, PrivacyBudget, SpendLedger};

use crate::PartyError;

// One-record sensitivity bound of the pairwise correlation score.
const R_SCORE_SENSITIVITY: f64 = 3.0;
// L2 sensitivity of a count histogram under add/remove of one record.
const HIST_SENSITIVITY: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct LocMrfConfig {
    pub tau_prime: usize,
    pub theta: f64,
    pub refine_rounds: usize,
    pub refine_batch: usize,
    pub budget: PrivacyBudget,
    pub stage_prefix: String,
}

/// Everything the local pipeline produces: the fitted model, the
/// triangulated local graph and the refined marginal set, all in local
/// attribute indices.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub model: MrfModel,
    pub triangulated: Triangulated,
    pub marginals: Vec<Marginal>,
    pub noisy_pair_scores: BTreeMap<(usize, usize), f64>,
}

/// Runs the four local phases on raw party data. The whole budget is
/// consumed: a tenth on pair scores (when the party has pairs at all) and
/// the rest split evenly across the initial measurement wave and each
/// refinement round.
pub fn loc_mrf(
    data: &Dataset,
    config: &LocMrfConfig,
    rng: &mut ChaCha8Rng,
    ledger: &mut SpendLedger,
) -> Result<LocalFit, PartyError> {
    let schema = data.schema().clone();
    let d = schema.attribute_count();
    let n = data.row_count() as f64;
    let pair_count = d * (d - 1) / 2;
    let (eps_r, delta_r) = if pair_count > 0 {
        (0.1 * config.budget.epsilon, 0.1 * config.budget.delta)
    } else {
        (0.0, 0.0)
    };
    // The initial wave measures the structure everything else builds on,
    // so it takes half the measurement budget; refinement rounds share the
    // rest evenly.
    let eps_measure = config.budget.epsilon - eps_r;
    let delta_measure = config.budget.delta - delta_r;
    let (eps_w0, delta_w0, eps_wr, delta_wr) = if config.refine_rounds == 0 {
        (eps_measure, delta_measure, 0.0, 0.0)
    } else {
        let r = config.refine_rounds as f64;
        (
            0.5 * eps_measure,
            0.5 * delta_measure,
            0.5 * eps_measure / r,
            0.5 * delta_measure / r,
        )
    };

    // Phase 1: noisy pairwise scores, then greedy edges under tau'.
    let mut scores: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    if pair_count > 0 {
        let sigma_r = privacy::gaussian_sigma_composed(
            eps_r,
            delta_r,
            R_SCORE_SENSITIVITY,
            pair_count,
        )?;
        for a in 0..d {
            for b in a + 1..d {
                let hist = compute_histogram(data, &Marginal::pair(a, b)?)?;
                let score = if hist.total() > 0.0 {
                    mrf::r_score(&hist, n, sigma_r, &schema, rng)?
                } else {
                    0.0
                };
                scores.insert((a, b), score);
            }
        }
        ledger.record(
            &format!("{}/loc_mrf/r_scores", config.stage_prefix),
            eps_r,
            delta_r,
            "gaussian, zCDP composed over pairs",
        );
    }
    let mut ranked: Vec<(usize, usize)> = scores.keys().copied().collect();
    ranked.sort_by(|x, y| {
        scores[y]
            .partial_cmp(&scores[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| x.cmp(y))
    });
    let base = AttributeGraph::for_schema(&schema);
    let (graph, _) = greedy_edge_selection(&base, &ranked, config.tau_prime, &schema);
    let tri = vertimrf_core::mrf::triangulate(&graph);

    // Phase 2: theta-useful subsets of the maximal cliques. The expected
    // noise magnitude assumes the densest wave (one release per attribute).
    let sigma_est = privacy::gaussian_sigma_composed(eps_w0, delta_w0, HIST_SENSITIVITY, d)?;
    let g = privacy::expected_abs_gaussian(sigma_est);
    let mut candidates: BTreeSet<Marginal> = BTreeSet::new();
    for clique in &tri.cliques {
        for mask in 1u32..(1 << clique.len().min(20)) {
            let subset: Vec<usize> = clique
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &a)| a)
                .collect();
            let m = Marginal::new(subset)?;
            if m.cell_count(&schema)? > config.tau_prime.max(1) {
                continue;
            }
            if m.arity() == 1 || mrf::theta_useful(&m, n, config.theta, g, &schema)? {
                candidates.insert(m);
            }
        }
    }

    // Phase 3: the best-scoring useful pair per attribute, singleton
    // fallback, so every local attribute is covered.
    let mut selected: BTreeSet<Marginal> = BTreeSet::new();
    for a in 0..d {
        let best_pair = candidates
            .iter()
            .filter(|m| m.arity() == 2 && m.contains(a))
            .max_by(|x, y| {
                let sx = scores[&(x.attributes()[0], x.attributes()[1])];
                let sy = scores[&(y.attributes()[0], y.attributes()[1])];
                sx.partial_cmp(&sy)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| y.cmp(x))
            });
        match best_pair {
            Some(m) => selected.insert(m.clone()),
            None => selected.insert(Marginal::single(a)),
        };
    }
    let mut marginals: Vec<Marginal> = selected.into_iter().collect();

    // Initial measurement wave and model fit.
    let mut targets: BTreeMap<Marginal, ContingencyHistogram> = BTreeMap::new();
    measure_wave(
        data,
        &marginals,
        eps_w0,
        delta_w0,
        rng,
        &mut targets,
        ledger,
        &format!("{}/loc_mrf/measure0", config.stage_prefix),
    )?;
    let mut model = MrfModel::new(schema.clone(), &graph, marginals.clone())?;
    model.fit_theta(&targets, FitOptions::default())?;

    // Phase 4: fixed refinement rounds. Each round measures a batch of
    // unseen useful candidates (or re-measures the current set when the
    // pool is dry, averaging the repeats) and refits.
    for round in 0..config.refine_rounds {
        let in_model: BTreeSet<&Marginal> = marginals.iter().collect();
        let mut pool: Vec<Marginal> = candidates
            .iter()
            .filter(|m| m.arity() >= 2 && !in_model.contains(m))
            .cloned()
            .collect();
        let stage = format!("{}/loc_mrf/refine{}", config.stage_prefix, round + 1);
        if pool.is_empty() {
            // Re-measure what we have and average, keeping the spend exact.
            let mut fresh = BTreeMap::new();
            measure_wave(data, &marginals, eps_wr, delta_wr, rng, &mut fresh, ledger, &stage)?;
            for (m, new_hist) in fresh {
                if let Some(old) = targets.get_mut(&m) {
                    let merged: Vec<f64> = old
                        .cells()
                        .iter()
                        .zip(new_hist.cells())
                        .map(|(a, b)| (a + b) / 2.0)
                        .collect();
                    *old = ContingencyHistogram::new(m, merged, HistKind::Counts, &schema)?;
                }
            }
        } else {
            // Deterministic subsample of the pool.
            for i in (1..pool.len()).rev() {
                let j = (rng.random::<u64>() as usize) % (i + 1);
                pool.swap(i, j);
            }
            pool.truncate(config.refine_batch.max(1));
            pool.sort();
            let mut measured = BTreeMap::new();
            measure_wave(data, &pool, eps_wr, delta_wr, rng, &mut measured, ledger, &stage)?;
            // Every measurement is paid for, so every measured marginal
            // becomes a target; the batch sampler already prioritizes the
            // unseen ones.
            let mut added = Vec::new();
            for (m, hist) in measured {
                targets.insert(m.clone(), hist);
                added.push(m.clone());
                marginals.push(m);
            }
            model.add_marginals(added)?;
        }
        model.fit_theta(&targets, FitOptions::default())?;
    }

    Ok(LocalFit {
        triangulated: model.triangulated().clone(),
        marginals: model.marginals().to_vec(),
        model,
        noisy_pair_scores: scores,
    })
}

#[allow(clippy::too_many_arguments)]
fn measure_wave(
    data: &Dataset,
    marginals: &[Marginal],
    eps: f64,
    delta: f64,
    rng: &mut ChaCha8Rng,
    out: &mut BTreeMap<Marginal, ContingencyHistogram>,
    ledger: &mut SpendLedger,
    stage: &str,
) -> Result<(), PartyError> {
    let sigma =
        privacy::gaussian_sigma_composed(eps, delta, HIST_SENSITIVITY, marginals.len().max(1))?;
    for m in marginals {
        let mut hist = compute_histogram(data, m)?;
        for cell in hist.cells_mut() {
            *cell += privacy::gaussian(sigma, rng)?;
        }
        out.insert(m.clone(), hist);
    }
    ledger.record(stage, eps, delta, "gaussian, zCDP composed over marginals");
    Ok(())
}
