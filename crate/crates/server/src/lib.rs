//! The untrusted-server half of the pipeline. The server sees only party
//! messages and public domain metadata: it merges local graphs into a
//! global attribute graph, transfers local-MRF knowledge into a global
//! model, optimizes cross-party marginals estimated from the encoded
//! attributes, and samples synthetic data. This crate deliberately has no
//! dependency on the party crate, so hash keys and raw datasets are out of
//! reach by construction.

mod consistency;
mod estimate;
mod graphcom;
mod optmrf;

pub use consistency::{enforce_consistency, ConsistencyOutcome};
pub use estimate::{his_rec, MarginalEstimator};
pub use graphcom::{graph_com, select_cross_marginals, GraphComOutcome};
pub use optmrf::{init_mrf, opt_mrf, synthesize, OptRoundReport};

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vertimrf_core::data::{DataError, Dataset, Marginal, Schema};
use vertimrf_core::fo::{FoEncodedData, FoError};
use vertimrf_core::message::{EncodedAttributes, MessageError, PartyMessage};
use vertimrf_core::mrf::{FitReport, MrfError, MrfModel};
use vertimrf_core::binning::{BinningError, BinningSpec};
use vertimrf_core::sketch::{SketchError, SketchSet};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mrf(#[from] MrfError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Fo(#[from] FoError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error("attribute {0} is claimed by more than one party")]
    OverlappingAttribute(usize),
    #[error("attribute {0} is not covered by any party")]
    UncoveredAttribute(usize),
    #[error("attribute {attr} domain mismatch: schema {schema}, message {message}")]
    DomainMismatch {
        attr: usize,
        schema: usize,
        message: usize,
    },
    #[error("expected exactly one noisy count across messages, found {0}")]
    CountCardinality(usize),
    #[error("messages mix sketch and frequency-oracle encodings")]
    MixedEncodings,
    #[error("zero-mass histogram for {0:?}")]
    ZeroMass(Vec<usize>),
    #[error("histogram recovery is missing the value distribution for attribute {0}")]
    MissingValueDistribution(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Clique-domain cap for the global graph.
    pub tau: usize,
    /// Minimum average cell count for a cross-party marginal.
    pub d_c: f64,
    pub opt_rounds: usize,
    pub opt_batch: usize,
    /// L1 gap below which an estimated marginal is not worth adding.
    pub add_threshold: f64,
    pub consistency_iterations: usize,
    pub consistency_tolerance: f64,
    /// Largest cross-party marginal arity considered for the optimizer.
    pub max_cross_arity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            tau: 100_000,
            d_c: 50.0,
            opt_rounds: 10,
            opt_batch: 8,
            add_threshold: 0.01,
            consistency_iterations: 100,
            consistency_tolerance: 1e-4,
            max_cross_arity: 3,
        }
    }
}

/// A party's local model reconstructed from its message, with the
/// global-to-local index maps needed to query it.
pub struct LocalView {
    pub party_id: u32,
    /// Global attribute ids, ascending; position = local index.
    pub attr_ids: Vec<usize>,
    pub model: MrfModel,
}

impl LocalView {
    /// Infers a marginal given in global ids, returning cells in the
    /// canonical (ascending-global) order.
    pub fn infer_global(&self, marginal: &Marginal) -> Result<Vec<f64>, ServerError> {
        let local: Vec<usize> = marginal
            .attributes()
            .iter()
            .map(|a| {
                self.attr_ids
                    .iter()
                    .position(|x| x == a)
                    .ok_or(ServerError::UncoveredAttribute(*a))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // Ascending global ids map to ascending local ids, so cell order
        // is preserved.
        let m = Marginal::new(local).map_err(ServerError::Data)?;
        let hist = self.model.infer_marginal(&m).map_err(ServerError::Mrf)?;
        Ok(hist.cells().to_vec())
    }
}

pub enum Encodings {
    Sketches(SketchSet),
    FrequencyOracle(FoEncodedData),
}

/// Everything the server holds after ingesting the party messages.
pub struct ServerState {
    pub schema: Schema,
    pub party_of: Vec<u32>,
    pub locals: Vec<LocalView>,
    pub encodings: Encodings,
    pub binning: BinningSpec,
    pub n_hat: f64,
    /// Current best per-attribute marginal distributions, initialized from
    /// the local models and updated by consistency enforcement.
    pub attr_marginals: BTreeMap<usize, Vec<f64>>,
}

/// Validates and ingests party messages against the public schema.
pub fn ingest(schema: &Schema, messages: &[PartyMessage]) -> Result<ServerState, ServerError> {
    let d = schema.attribute_count();
    let mut party_of = vec![u32::MAX; d];
    for msg in messages {
        msg.audit()?;
        for &(attr, domain) in &msg.attributes {
            if attr >= d {
                return Err(ServerError::UncoveredAttribute(attr));
            }
            if schema.domain_size(attr) != domain {
                return Err(ServerError::DomainMismatch {
                    attr,
                    schema: schema.domain_size(attr),
                    message: domain,
                });
            }
            if party_of[attr] != u32::MAX {
                return Err(ServerError::OverlappingAttribute(attr));
            }
            party_of[attr] = msg.party_id;
        }
    }
    if let Some(attr) = party_of.iter().position(|&p| p == u32::MAX) {
        return Err(ServerError::UncoveredAttribute(attr));
    }

    let mut locals = Vec::with_capacity(messages.len());
    for msg in messages {
        let attr_ids: Vec<usize> = msg.attributes.iter().map(|&(a, _)| a).collect();
        let sub_schema = schema.project(&attr_ids)?;
        let to_local: BTreeMap<usize, usize> = attr_ids
            .iter()
            .enumerate()
            .map(|(local, &global)| (global, local))
            .collect();
        let mut graph = vertimrf_core::mrf::AttributeGraph::new(0..attr_ids.len());
        for (a, b) in msg.graph.edges() {
            graph.add_edge(to_local[&a], to_local[&b]);
        }
        let marginals: Vec<Marginal> = msg
            .marginals
            .iter()
            .map(|m| {
                let local: Vec<usize> = m.attributes().iter().map(|a| to_local[a]).collect();
                Marginal::new(local).map_err(ServerError::Data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut model = MrfModel::new(sub_schema, &graph, marginals)?;
        model.set_theta(msg.theta.clone())?;
        locals.push(LocalView {
            party_id: msg.party_id,
            attr_ids,
            model,
        });
    }

    let mut sketch_sets = Vec::new();
    let mut fo_parts = Vec::new();
    for msg in messages {
        match &msg.encoding {
            EncodedAttributes::Sketches(s) => sketch_sets.push(s.clone()),
            EncodedAttributes::FrequencyOracle(f) => fo_parts.push(f.clone()),
            EncodedAttributes::None => {}
        }
    }
    let encodings = match (sketch_sets.is_empty(), fo_parts.is_empty()) {
        (false, true) => Encodings::Sketches(SketchSet::merge(&sketch_sets)?),
        (true, false) => Encodings::FrequencyOracle(FoEncodedData::merge(&fo_parts)?),
        _ => return Err(ServerError::MixedEncodings),
    };

    let counts: Vec<f64> = messages.iter().filter_map(|m| m.noisy_count).collect();
    if counts.len() != 1 {
        return Err(ServerError::CountCardinality(counts.len()));
    }
    let n_hat = counts[0];

    let binning = BinningSpec::merge(
        &messages
            .iter()
            .map(|m| m.binning.clone())
            .collect::<Vec<_>>(),
    );
    binning.validate()?;

    let mut attr_marginals = BTreeMap::new();
    for view in &locals {
        for &attr in &view.attr_ids {
            let cells = view.infer_global(&Marginal::single(attr))?;
            attr_marginals.insert(attr, cells);
        }
    }

    Ok(ServerState {
        schema: schema.clone(),
        party_of,
        locals,
        encodings,
        binning,
        n_hat,
        attr_marginals,
    })
}

/// Run report written next to the synthetic data.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ServerReport {
    pub cross_edges: Vec<(usize, usize, f64)>,
    pub marginal_set: Vec<Vec<usize>>,
    pub cross_marginals: Vec<Vec<usize>>,
    pub init_fit: Option<FitReport>,
    pub rounds: Vec<OptRoundReport>,
    pub n_hat: f64,
}

/// The full server pipeline: graph combination, knowledge transfer,
/// cross-marginal optimization and sampling.
pub fn run_pipeline(
    schema: &Schema,
    messages: &[PartyMessage],
    config: &ServerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, MrfModel, ServerReport), ServerError> {
    let mut state = ingest(schema, messages)?;
    let graph_outcome = graph_com(&state, config)?;
    let (mut model, init_fit, targets) = init_mrf(&state, &graph_outcome.graph)?;
    let cross = select_cross_marginals(
        model.triangulated(),
        state.n_hat,
        config.d_c,
        &state.party_of,
        &state.schema,
        config.max_cross_arity,
    )?;
    let rounds = opt_mrf(&mut model, &cross, &mut state, targets, config, rng)?;
    let synthetic = synthesize(&model, state.n_hat, rng)?;
    let report = ServerReport {
        cross_edges: graph_outcome.added_edges,
        marginal_set: model
            .marginals()
            .iter()
            .map(|m| m.attributes().to_vec())
            .collect(),
        cross_marginals: cross.iter().map(|m| m.attributes().to_vec()).collect(),
        init_fit: Some(init_fit),
        rounds,
        n_hat: state.n_hat,
    };
    Ok((synthetic, model, report))
}
