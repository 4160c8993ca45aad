//! The data-party side of the pipeline: a local DP MRF over the party's
//! own attributes, equal-width binning with noisy per-bin value
//! distributions, sketch or frequency-oracle encoding of the (binned)
//! columns, and assembly of the single message sent to the server.
//!
//! Hash keys live here. The server crate has no dependency on this one, so
//! it cannot reach the key oracle; only key indices travel in messages.

mod locmrf;

pub use locmrf::{loc_mrf, LocMrfConfig, LocalFit};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use vertimrf_core::binning::{bin_of, bin_values, binned_domain, AttributeBinning, BinningSpec};
use vertimrf_core::data::{DataError, Dataset, Schema};
use vertimrf_core::fo::{self, FoError};
use vertimrf_core::message::{
    EncodedAttributes, Mechanism, MessageError, PartyMessage, SectionId,
};
use vertimrf_core::mrf::MrfError;
use vertimrf_core::privacy::{
    self, PrivacyBudget, PrivacyError, SpendLedger, StageBudgets,
};
use vertimrf_core::sketch::{self, HashKey, SketchError};

#[derive(Debug, Error)]
pub enum PartyError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Fo(#[from] FoError),
    #[error(transparent)]
    Mrf(#[from] MrfError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error("party has no attributes")]
    NoAttributes,
    #[error("sketch encoder requires the key oracle")]
    MissingKeys,
    #[error("attribute count mismatch between data and assignment")]
    AttributeMismatch,
}

/// Derives the t hash keys every party shares from a master seed. Stands in
/// for the multi-party key agreement; the server never holds one of these.
#[derive(Debug, Clone)]
pub struct KeyOracle {
    keys: Vec<HashKey>,
}

impl KeyOracle {
    pub fn derive(master_seed: u64, t: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        let keys = (0..t).map(|_| HashKey(rng.random::<u64>())).collect();
        Self { keys }
    }

    pub fn keys(&self) -> &[HashKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Clique-domain cap for local models: tau / (m * mean_domain^2), floored
/// at the party's largest attribute domain so singleton cliques stay legal.
pub fn local_clique_bound(tau: usize, m: usize, global_schema: &Schema) -> usize {
    let d = global_schema.attribute_count() as f64;
    let mean_u: f64 = global_schema.domain_sizes().iter().sum::<usize>() as f64 / d;
    let bound = (tau as f64 / (m as f64 * mean_u * mean_u)).floor() as usize;
    let max_u = global_schema.domain_sizes().into_iter().max().unwrap_or(1);
    bound.max(max_u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EncoderKind {
    /// DP Flajolet-Martin sketches with the given gamma and repeat count.
    Fm { gamma: f64, t: u32 },
    /// Generalized randomized response.
    Fo,
}

/// One simulated data party: its global attribute ids and the vertical
/// slice of the table it holds.
#[derive(Debug, Clone)]
pub struct Party {
    pub id: u32,
    /// Global attribute ids, ascending; data columns follow this order.
    pub attr_ids: Vec<usize>,
    pub data: Dataset,
}

impl Party {
    pub fn new(id: u32, attr_ids: Vec<usize>, data: Dataset) -> Result<Self, PartyError> {
        if attr_ids.is_empty() {
            return Err(PartyError::NoAttributes);
        }
        if attr_ids.len() != data.schema().attribute_count() {
            return Err(PartyError::AttributeMismatch);
        }
        Ok(Self { id, attr_ids, data })
    }
}

#[derive(Debug, Clone)]
pub struct PartyPipelineConfig {
    pub tau_prime: usize,
    pub theta: f64,
    pub refine_rounds: usize,
    pub refine_batch: usize,
    pub encoder: EncoderKind,
    /// Equal-width bin count; None disables binning.
    pub bins: Option<usize>,
    pub budgets: StageBudgets,
    /// Total attribute count across all parties, for the encoder budget.
    pub d_global: u32,
    /// Set on exactly one party, which releases the noisy record count.
    pub emit_noisy_count: bool,
}

/// Applies the equal-width bin map to every column; attributes no wider
/// than b pass through unchanged. Returns (global attr id, binned domain,
/// binned values) triples. Uses only domain sizes, never data.
pub fn bin_attributes(party: &Party, bins: Option<usize>) -> Vec<(usize, usize, Vec<u32>)> {
    let schema = party.data.schema();
    party
        .attr_ids
        .iter()
        .enumerate()
        .map(|(local, &global)| {
            let u = schema.domain_size(local);
            let column = party.data.column(local);
            match bins {
                Some(b) => {
                    let mapped = column.iter().map(|&v| bin_of(v, u, b)).collect();
                    (global, binned_domain(u, b), mapped)
                }
                None => (global, u, column),
            }
        })
        .collect()
}

/// Laplace-noised per-bin value distributions for every attribute the bin
/// map actually coarsens. Noisy frequencies are clamped at zero and
/// renormalized per bin; a bin with no remaining mass falls back to
/// uniform. Spends eps_per_attr per coarsened attribute.
pub fn value_distributions<R: Rng + ?Sized>(
    party: &Party,
    bins: usize,
    eps_per_attr: f64,
    rng: &mut R,
    ledger: &mut SpendLedger,
) -> Result<BinningSpec, PartyError> {
    let schema = party.data.schema();
    let mut spec = BinningSpec::default();
    let mut spent = 0.0;
    for (local, &global) in party.attr_ids.iter().enumerate() {
        let u = schema.domain_size(local);
        if u <= bins {
            continue; // identity map, nothing to release
        }
        let mut counts = vec![0.0f64; u];
        for row in 0..party.data.row_count() {
            counts[party.data.value(row, local) as usize] += 1.0;
        }
        let b_count = binned_domain(u, bins);
        let mut distributions = Vec::with_capacity(b_count);
        for bin in 0..b_count {
            let values = bin_values(u, bins, bin as u32);
            let mut noisy: Vec<f64> = values
                .iter()
                .map(|&v| {
                    let noise = privacy::laplace(1.0 / eps_per_attr, rng).unwrap_or(0.0);
                    (counts[v as usize] + noise).max(0.0)
                })
                .collect();
            let mass: f64 = noisy.iter().sum();
            if mass <= 0.0 {
                let uniform = 1.0 / values.len() as f64;
                noisy.iter_mut().for_each(|p| *p = uniform);
            } else {
                noisy.iter_mut().for_each(|p| *p /= mass);
            }
            distributions.push(noisy);
        }
        spec.attrs.insert(
            global,
            AttributeBinning {
                raw_domain: u,
                bins: b_count,
                distributions,
            },
        );
        spent += eps_per_attr;
    }
    if spent > 0.0 {
        ledger.record(
            &format!("party{}/binning", party.id),
            spent,
            0.0,
            "laplace per attribute histogram",
        );
    }
    Ok(spec)
}

pub struct PartyOutput {
    pub message: PartyMessage,
    pub wire_bytes: Vec<u8>,
    pub local_fit: LocalFit,
}

/// Runs the whole party pipeline and assembles the message: local MRF on
/// raw attributes, binning, value distributions, encoding of the binned
/// columns and the optional noisy count. The encoder stage spend is a
/// single cross-party entry recorded by the orchestrator, not here.
pub fn run_party(
    party: &Party,
    config: &PartyPipelineConfig,
    keys: Option<&KeyOracle>,
    rng: &mut ChaCha8Rng,
    ledger: &mut SpendLedger,
) -> Result<PartyOutput, PartyError> {
    // Local MRF over raw attributes; binning only affects the encoder path.
    let loc_cfg = LocMrfConfig {
        tau_prime: config.tau_prime,
        theta: config.theta,
        refine_rounds: config.refine_rounds,
        refine_batch: config.refine_batch,
        budget: config.budgets.loc_mrf_per_party,
        stage_prefix: format!("party{}", party.id),
    };
    let local_fit = loc_mrf(&party.data, &loc_cfg, rng, ledger)?;

    let columns = bin_attributes(party, config.bins);
    let binning = match config.bins {
        Some(b) if config.budgets.binning_eps_per_attr > 0.0 => value_distributions(
            party,
            b,
            config.budgets.binning_eps_per_attr,
            rng,
            ledger,
        )?,
        _ => BinningSpec::default(),
    };

    let encoding = match config.encoder {
        EncoderKind::Fm { gamma, t } => {
            let oracle = keys.ok_or(PartyError::MissingKeys)?;
            let phantom_seed = rng.random::<u64>();
            let set = sketch::loc_enc_sketch(
                &columns,
                config.budgets.loc_enc,
                gamma,
                t,
                oracle.keys(),
                config.d_global,
                phantom_seed,
            )?;
            EncodedAttributes::Sketches(set)
        }
        EncoderKind::Fo => {
            let (eps_prime, _) =
                fo::fo_eps_prime_for_budget(config.budgets.loc_enc, config.d_global)?;
            let enc = fo::loc_enc_fo(&columns, eps_prime, rng)?;
            EncodedAttributes::FrequencyOracle(enc)
        }
    };

    let noisy_count = if config.emit_noisy_count {
        Some(privacy::sanitize_count(
            party.data.row_count() as u64,
            config.budgets.noisy_count_eps,
            rng,
            ledger,
            &format!("party{}/noisy_count", party.id),
        )?)
    } else {
        None
    };

    // Remap the local fit into global attribute ids for the wire.
    let schema = party.data.schema();
    let marginals = local_fit
        .marginals
        .iter()
        .map(|m| m.remap(&party.attr_ids))
        .collect::<Result<Vec<_>, _>>()?;
    let mut graph = vertimrf_core::mrf::AttributeGraph::new(party.attr_ids.iter().copied());
    for (a, b) in local_fit.triangulated.graph.edges() {
        graph.add_edge(party.attr_ids[a], party.attr_ids[b]);
    }
    let mut provenance = vec![
        (SectionId::Graph, Mechanism::NoisyScoreSelection),
        (SectionId::Marginals, Mechanism::NoisyScoreSelection),
        (SectionId::Theta, Mechanism::GaussianMeasurement),
        (
            SectionId::Encoding,
            match config.encoder {
                EncoderKind::Fm { .. } => Mechanism::Dpfm,
                EncoderKind::Fo => Mechanism::Grr,
            },
        ),
    ];
    if !binning.attrs.is_empty() {
        provenance.push((SectionId::Binning, Mechanism::Laplace));
    }
    if noisy_count.is_some() {
        provenance.push((SectionId::Count, Mechanism::Laplace));
    }
    let message = PartyMessage {
        party_id: party.id,
        attributes: party
            .attr_ids
            .iter()
            .enumerate()
            .map(|(local, &global)| (global, schema.domain_size(local)))
            .collect(),
        graph,
        marginals,
        theta: local_fit.model.theta().to_vec(),
        encoding,
        binning,
        noisy_count,
        provenance,
    };
    message.audit()?;
    let wire_bytes = message.encode();
    Ok(PartyOutput {
        message,
        wire_bytes,
        local_fit,
    })
}

/// Total budget sanity check used by the orchestrator after all parties
/// ran and the shared encoder entry was recorded.
pub fn check_ledger(ledger: &SpendLedger, total: PrivacyBudget) -> Result<(), PartyError> {
    ledger.check_within(total)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vertimrf_core::compute_histogram;
    use vertimrf_core::data::Marginal;

    fn binary_schema(d: usize) -> Schema {
        Schema::from_sizes(&vec![2; d]).unwrap()
    }

    #[test]
    fn key_oracle_is_deterministic() {
        let a = KeyOracle::derive(42, 16);
        let b = KeyOracle::derive(42, 16);
        assert_eq!(a.keys(), b.keys());
        assert_eq!(a.len(), 16);
        let c = KeyOracle::derive(43, 16);
        assert_ne!(a.keys(), c.keys());
    }

    #[test]
    fn local_clique_bound_examples() {
        let s = binary_schema(16);
        assert_eq!(local_clique_bound(100_000, 2, &s), 12_500);
        // Larger m shrinks the bound.
        assert!(local_clique_bound(100_000, 4, &s) < 12_500);
        // The floor keeps singleton cliques legal.
        let wide = Schema::from_sizes(&[40, 2]).unwrap();
        assert!(local_clique_bound(10, 2, &wide) >= 40);
    }

    #[test]
    fn bin_attributes_examples() {
        let schema = Schema::from_sizes(&[8, 2]).unwrap();
        let rows: Vec<Vec<u32>> = (0..8).map(|i| vec![i as u32, (i % 2) as u32]).collect();
        let data = Dataset::new(schema, rows).unwrap();
        let party = Party::new(0, vec![3, 5], data).unwrap();
        let cols = bin_attributes(&party, Some(4));
        assert_eq!(cols[0].0, 3);
        assert_eq!(cols[0].1, 4);
        assert_eq!(cols[0].2, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        // Narrow attribute passes through.
        assert_eq!(cols[1].1, 2);
        assert_eq!(cols[1].2, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        // No binning configured: raw columns.
        let raw = bin_attributes(&party, None);
        assert_eq!(raw[0].1, 8);
    }

    #[test]
    fn binning_commutes_with_histograms() {
        let schema = Schema::from_sizes(&[6]).unwrap();
        let rows: Vec<Vec<u32>> = (0..60).map(|i| vec![(i % 6) as u32]).collect();
        let data = Dataset::new(schema.clone(), rows).unwrap();
        let party = Party::new(0, vec![0], data.clone()).unwrap();
        let binned = bin_attributes(&party, Some(3));
        // Histogram of binned values == bin-aggregated histogram of raw.
        let mut from_binned = vec![0.0; 3];
        for &v in &binned[0].2 {
            from_binned[v as usize] += 1.0;
        }
        let raw_hist = compute_histogram(&data, &Marginal::single(0)).unwrap();
        let mut aggregated = vec![0.0; 3];
        for (v, &c) in raw_hist.cells().iter().enumerate() {
            aggregated[bin_of(v as u32, 6, 3) as usize] += c;
        }
        assert_eq!(from_binned, aggregated);
        assert_eq!(from_binned.iter().sum::<f64>(), 60.0);
    }

    #[test]
    fn value_distributions_examples() {
        // eps -> infinity: counts (30, 10) normalize to (0.75, 0.25).
        let schema = Schema::from_sizes(&[4]).unwrap();
        let mut rows = vec![vec![0u32]; 30];
        rows.extend(vec![vec![1u32]; 10]);
        let data = Dataset::new(schema, rows).unwrap();
        let party = Party::new(0, vec![0], data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ledger = SpendLedger::new();
        let spec = value_distributions(&party, 2, 1e9, &mut rng, &mut ledger).unwrap();
        let b = &spec.attrs[&0];
        assert!((b.distributions[0][0] - 0.75).abs() < 1e-6);
        assert!((b.distributions[0][1] - 0.25).abs() < 1e-6);
        // Values 2 and 3 never occur: the bin renormalizes or falls back.
        for dist in &b.distributions {
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(dist.iter().all(|&p| p >= 0.0));
        }
        spec.validate().unwrap();
        assert_eq!(ledger.entries().len(), 1);
        assert!((ledger.total_epsilon() - 1e9).abs() < 1.0);
    }

    #[test]
    fn empty_bin_falls_back_to_uniform() {
        // Bin 1 holds values {2,3}, both with zero count. Whenever both
        // Laplace draws land non-positive the clamped mass is zero and the
        // uniform fallback must kick in; otherwise the output is still a
        // valid distribution.
        let schema = Schema::from_sizes(&[4]).unwrap();
        let data = Dataset::new(schema, vec![vec![0u32]; 5]).unwrap();
        let party = Party::new(0, vec![0], data).unwrap();
        let mut hit_fallback = false;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ledger = SpendLedger::new();
            let spec = value_distributions(&party, 2, 5.0, &mut rng, &mut ledger).unwrap();
            let b = &spec.attrs[&0];
            let dist = &b.distributions[1];
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(dist.iter().all(|&p| p >= 0.0));
            if dist == &vec![0.5, 0.5] {
                hit_fallback = true;
            }
        }
        assert!(hit_fallback, "uniform fallback never triggered in 40 seeds");
    }
}
