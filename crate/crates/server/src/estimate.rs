//! Marginal estimation over encoded attributes, with histogram recovery
//! from binned to raw domains.

use vertimrf_core::binning::{bin_of, index_in_bin, BinningSpec};
use vertimrf_core::data::{ContingencyHistogram, HistKind, Marginal, Schema};
use vertimrf_core::fo::car_est_fo;
use vertimrf_core::sketch::car_est_sketch;

use crate::{Encodings, ServerError, ServerState};

/// Estimates a raw-domain marginal histogram from the encodings, applying
/// histogram recovery when any of its attributes were binned. Pure
/// post-processing of DP payloads.
pub trait MarginalEstimator {
    fn estimate(&self, marginal: &Marginal) -> Result<ContingencyHistogram, ServerError>;
}

impl MarginalEstimator for ServerState {
    fn estimate(&self, marginal: &Marginal) -> Result<ContingencyHistogram, ServerError> {
        let attrs = marginal.attributes();
        let low_cells = match &self.encodings {
            Encodings::Sketches(set) => car_est_sketch(attrs, set, self.n_hat)?,
            Encodings::FrequencyOracle(enc) => car_est_fo(attrs, enc)?,
        };
        if attrs.iter().any(|a| self.binning.attrs.contains_key(a)) {
            his_rec(&low_cells, marginal, &self.binning, &self.schema)
        } else {
            ContingencyHistogram::new(
                marginal.clone(),
                low_cells,
                HistKind::Counts,
                &self.schema,
            )
            .map_err(ServerError::Data)
        }
    }
}

/// Spreads each binned cell's mass over its raw cells proportionally to
/// the product of per-attribute value distributions. Unbinned attributes
/// pass through; total mass is preserved exactly.
pub fn his_rec(
    low_cells: &[f64],
    marginal: &Marginal,
    spec: &BinningSpec,
    schema: &Schema,
) -> Result<ContingencyHistogram, ServerError> {
    let attrs = marginal.attributes();
    let raw_sizes: Vec<usize> = attrs.iter().map(|&a| schema.domain_size(a)).collect();
    let mut low_sizes = Vec::with_capacity(attrs.len());
    for (&attr, &raw) in attrs.iter().zip(&raw_sizes) {
        match spec.attrs.get(&attr) {
            Some(b) => {
                if b.raw_domain != raw {
                    return Err(ServerError::DomainMismatch {
                        attr,
                        schema: raw,
                        message: b.raw_domain,
                    });
                }
                low_sizes.push(b.bins);
            }
            None => low_sizes.push(raw),
        }
    }
    let expected: usize = low_sizes.iter().product();
    if low_cells.len() != expected {
        return Err(ServerError::Data(
            vertimrf_core::data::DataError::LengthMismatch(low_cells.len(), expected),
        ));
    }
    let raw_total: usize = raw_sizes.iter().product();
    let mut out = vec![0.0f64; raw_total];
    let mut tuple = vec![0u32; attrs.len()];
    for (cell, slot) in out.iter_mut().enumerate() {
        let mut rest = cell;
        for (i, &u) in raw_sizes.iter().enumerate().rev() {
            tuple[i] = (rest % u) as u32;
            rest /= u;
        }
        let mut low_idx = 0usize;
        let mut weight = 1.0f64;
        for (i, &attr) in attrs.iter().enumerate() {
            match spec.attrs.get(&attr) {
                Some(b) => {
                    let bin = bin_of(tuple[i], b.raw_domain, b.bins);
                    low_idx = low_idx * low_sizes[i] + bin as usize;
                    let within = index_in_bin(tuple[i], b.raw_domain, b.bins);
                    let dist = b
                        .distributions
                        .get(bin as usize)
                        .ok_or(ServerError::MissingValueDistribution(attr))?;
                    weight *= dist
                        .get(within)
                        .copied()
                        .ok_or(ServerError::MissingValueDistribution(attr))?;
                }
                None => {
                    low_idx = low_idx * low_sizes[i] + tuple[i] as usize;
                }
            }
        }
        *slot = low_cells[low_idx] * weight;
    }
    ContingencyHistogram::new(marginal.clone(), out, HistKind::Counts, schema)
        .map_err(ServerError::Data)
}
