//! l-way TVD evaluation between real and synthetic tables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vertimrf_core::data::{Dataset, Marginal};
use vertimrf_core::privacy::SpendEntry;
use vertimrf_core::{compute_histogram, tvd};

use crate::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvdSummary {
    pub l: usize,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageAccounting {
    pub party: u32,
    pub wire_bytes: usize,
    pub encoding_bytes: usize,
    pub sketch_entries: Option<usize>,
    pub fo_rows: Option<usize>,
    pub theta_values: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_l: Vec<TvdSummary>,
    pub total_epsilon: f64,
    pub total_delta: f64,
    pub ledger: Vec<SpendEntry>,
    pub messages: Vec<MessageAccounting>,
    pub elapsed_ms: u128,
}

/// Samples up to `samples` distinct l-way marginals uniformly (all of them
/// when fewer exist) and averages the TVD between the two datasets'
/// normalized histograms.
pub fn eval_lway_tvd(
    real: &Dataset,
    synth: &Dataset,
    l: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TvdSummary, HarnessError> {
    if real.schema() != synth.schema() {
        return Err(HarnessError::Eval("schemas differ".into()));
    }
    let d = real.schema().attribute_count();
    if l == 0 || l > d {
        return Err(HarnessError::Eval(format!("l={l} out of range for d={d}")));
    }
    if real.row_count() == 0 || synth.row_count() == 0 {
        return Err(HarnessError::Eval("empty dataset".into()));
    }
    let marginals = sample_marginals(d, l, samples, rng);
    let mut values = Vec::with_capacity(marginals.len());
    for attrs in &marginals {
        let m = Marginal::new(attrs.clone())?;
        let a = compute_histogram(real, &m)?;
        let b = compute_histogram(synth, &m)?;
        let v = tvd(&a, &b)?;
        debug_assert!((0.0..=1.0 + 1e-12).contains(&v));
        values.push(v);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(TvdSummary {
        l,
        mean,
        std: var.sqrt(),
        samples: values.len(),
    })
}

/// Distinct l-subsets of 0..d: all of them when there are at most
/// `samples`, otherwise a uniform rejection sample.
fn sample_marginals(d: usize, l: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let total = binomial_capped(d, l, samples + 1);
    if total <= samples {
        let mut out = Vec::with_capacity(total);
        let mut combo: Vec<usize> = (0..l).collect();
        loop {
            out.push(combo.clone());
            // Rightmost position that can still advance.
            let Some(i) = (0..l).rev().find(|&i| combo[i] < d - l + i) else {
                return out;
            };
            combo[i] += 1;
            for j in i + 1..l {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(samples);
    let mut scratch: Vec<usize> = (0..d).collect();
    while out.len() < samples {
        for i in 0..l {
            let j = i + (rng.random::<u64>() as usize) % (d - i);
            scratch.swap(i, j);
        }
        let mut combo: Vec<usize> = scratch[..l].to_vec();
        combo.sort_unstable();
        if seen.insert(combo.clone()) {
            out.push(combo);
        }
    }
    out
}

/// C(d, l), saturating at `cap`.
fn binomial_capped(d: usize, l: usize, cap: usize) -> usize {
    let mut acc: u128 = 1;
    for i in 0..l {
        acc = acc * (d - i) as u128 / (i + 1) as u128;
        if acc >= cap as u128 {
            return cap;
        }
    }
    acc as usize
}
