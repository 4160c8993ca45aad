//! Generalized-randomized-response encoding and unbiased marginal
//! estimation through per-attribute transition-matrix inversion.
//!
//! Each GRR matrix is diagonal-plus-constant, so its inverse has the closed
//! form (I - qJ)/(p - q) and the multi-attribute inverse factorizes over
//! the Kronecker structure; the full transition matrix is never
//! materialized. Estimates keep negative cells: clamping would break
//! unbiasedness, and the consistency stage cleans up later.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::privacy::{PrivacyBudget, PrivacyError};

#[derive(Debug, Error)]
pub enum FoError {
    #[error("value {0} out of domain [0,{1})")]
    OutOfDomain(u32, usize),
    #[error("eps_prime must be positive, got {0}")]
    BadEpsPrime(f64),
    #[error("transition matrix singular for attribute with domain {0} (keep == flip)")]
    Singular(usize),
    #[error("attribute {0} missing from encoded data")]
    MissingAttribute(usize),
    #[error("encoded columns disagree on row count")]
    RaggedColumns,
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Keep probability of GRR: e^eps' / (e^eps' + u - 1).
pub fn grr_keep_probability(u: usize, eps_prime: f64) -> f64 {
    let e = eps_prime.exp();
    e / (e + (u as f64 - 1.0))
}

/// Perturbs one value: kept with the GRR keep probability, otherwise
/// replaced by a uniformly random other value. Consumes exactly one
/// uniform draw plus one more on a flip.
pub fn grr_perturb<R: Rng + ?Sized>(
    value: u32,
    u: usize,
    eps_prime: f64,
    rng: &mut R,
) -> Result<u32, FoError> {
    if (value as usize) >= u {
        return Err(FoError::OutOfDomain(value, u));
    }
    if eps_prime <= 0.0 {
        return Err(FoError::BadEpsPrime(eps_prime));
    }
    let keep = grr_keep_probability(u, eps_prime);
    if rng.random::<f64>() < keep {
        return Ok(value);
    }
    let other = rng.random_range(0..u as u32 - 1);
    Ok(if other >= value { other + 1 } else { other })
}

/// GRR-perturbed columns of one party (or the concatenation of all
/// parties), keyed by attribute id over the encoding domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoEncodedData {
    pub eps_prime: f64,
    pub columns: BTreeMap<usize, FoColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoColumn {
    pub domain: usize,
    pub values: Vec<u32>,
}

impl FoEncodedData {
    pub fn row_count(&self) -> usize {
        self.columns.values().next().map_or(0, |c| c.values.len())
    }

    pub fn merge(parts: &[FoEncodedData]) -> Result<FoEncodedData, FoError> {
        let mut columns = BTreeMap::new();
        let mut eps_prime = None;
        let mut rows = None;
        for part in parts {
            match eps_prime {
                None => eps_prime = Some(part.eps_prime),
                Some(e) if e == part.eps_prime => {}
                _ => return Err(FoError::BadEpsPrime(part.eps_prime)),
            }
            for (&attr, col) in &part.columns {
                match rows {
                    None => rows = Some(col.values.len()),
                    Some(n) if n == col.values.len() => {}
                    _ => return Err(FoError::RaggedColumns),
                }
                columns.insert(attr, col.clone());
            }
        }
        Ok(FoEncodedData {
            eps_prime: eps_prime.unwrap_or(0.0),
            columns,
        })
    }
}

/// Largest per-attribute eps' whose whole-record guarantee, the minimum of
/// the sequential bound d*eps'/2 and the RDP bound, stays within the stage
/// budget. Returns (eps', delta actually consumed).
pub fn fo_eps_prime_for_budget(
    budget: PrivacyBudget,
    d_global: u32,
) -> Result<(f64, f64), PrivacyError> {
    let d = d_global as f64;
    let eps_seq = 2.0 * budget.epsilon / d;
    let mut best = (eps_seq, 0.0);
    if budget.delta > 0.0 {
        let eps_rdp = budget.epsilon / (2.0 * (2.0 * d * (1.0 / budget.delta).ln()).sqrt());
        // Lemma applicability for the composed half-budget mechanisms.
        let applicable = (1.0 / budget.delta).ln() >= d * (eps_rdp / 2.0) * (eps_rdp / 2.0);
        if applicable && eps_rdp > best.0 {
            best = (eps_rdp, budget.delta);
        }
    }
    Ok(best)
}

/// Encodes every cell of the given columns independently with GRR. The
/// whole-record spend (one entry per run, composed over all parties'
/// attributes) is recorded by the orchestrator.
pub fn loc_enc_fo<R: Rng + ?Sized>(
    columns: &[(usize, usize, Vec<u32>)], // (attr id, domain, values)
    eps_prime: f64,
    rng: &mut R,
) -> Result<FoEncodedData, FoError> {
    let mut out = BTreeMap::new();
    for (attr, domain, values) in columns {
        let mut perturbed = Vec::with_capacity(values.len());
        for &v in values {
            perturbed.push(grr_perturb(v, *domain, eps_prime, rng)?);
        }
        out.insert(
            *attr,
            FoColumn {
                domain: *domain,
                values: perturbed,
            },
        );
    }
    Ok(FoEncodedData {
        eps_prime,
        columns: out,
    })
}

/// Unbiased marginal estimate over encoded attributes, in row-major order
/// over the encoding domains (ascending attribute id). Cells may be
/// negative; the total is preserved exactly.
pub fn car_est_fo(attrs: &[usize], encoded: &FoEncodedData) -> Result<Vec<f64>, FoError> {
    let mut cols = Vec::with_capacity(attrs.len());
    let mut sizes = Vec::with_capacity(attrs.len());
    for &a in attrs {
        let col = encoded
            .columns
            .get(&a)
            .ok_or(FoError::MissingAttribute(a))?;
        sizes.push(col.domain);
        cols.push(col);
    }
    let n = encoded.row_count();
    if cols.iter().any(|c| c.values.len() != n) {
        return Err(FoError::RaggedColumns);
    }
    let cell_count: usize = sizes.iter().product();
    let mut cells = vec![0.0f64; cell_count];
    for r in 0..n {
        let mut idx = 0usize;
        for (col, &u) in cols.iter().zip(&sizes) {
            idx = idx * u + col.values[r] as usize;
        }
        cells[idx] += 1.0;
    }
    // Invert attribute by attribute: new[v] = (old[v] - q * axis_sum) / (p - q).
    let mut stride_after: Vec<usize> = vec![1; attrs.len()];
    for i in (0..attrs.len().saturating_sub(1)).rev() {
        stride_after[i] = stride_after[i + 1] * sizes[i + 1];
    }
    for (i, &u) in sizes.iter().enumerate() {
        let p = grr_keep_probability(u, encoded.eps_prime);
        let q = (1.0 - p) / (u as f64 - 1.0);
        if (p - q).abs() < 1e-15 {
            return Err(FoError::Singular(u));
        }
        let stride = stride_after[i];
        let block = stride * u;
        for base in 0..cell_count / block {
            for offset in 0..stride {
                let start = base * block + offset;
                let mut axis_sum = 0.0;
                for v in 0..u {
                    axis_sum += cells[start + v * stride];
                }
                for v in 0..u {
                    let idx = start + v * stride;
                    cells[idx] = (cells[idx] - q * axis_sum) / (p - q);
                }
            }
        }
    }
    Ok(cells)
}
