//! Iterative consistency enforcement between a cross-party histogram
//! estimate and the per-attribute marginals inferred from local models.
//!
//! Per iteration, each attribute's marginal and the histogram's own
//! marginalization are averaged; the histogram absorbs the per-value
//! difference spread evenly over its co-cells (which leaves the other
//! attributes' marginals untouched), then negatives are clamped and the
//! whole table renormalized. The loop stops when the largest attribute
//! inconsistency falls under the tolerance.

use std::collections::BTreeMap;

use vertimrf_core::data::{ContingencyHistogram, HistKind, Schema};

use crate::ServerError;

#[derive(Debug, Clone)]
pub struct ConsistencyOutcome {
    /// Consistent histogram scaled back to counts by n_hat.
    pub histogram: ContingencyHistogram,
    /// Updated per-attribute marginal distributions.
    pub attr_marginals: BTreeMap<usize, Vec<f64>>,
    /// Max attribute L1 gap after each iteration.
    pub trace: Vec<f64>,
}

pub fn enforce_consistency(
    cross: &ContingencyHistogram,
    attr_marginals: &BTreeMap<usize, Vec<f64>>,
    iterations: usize,
    tolerance: f64,
    n_hat: f64,
    schema: &Schema,
) -> Result<ConsistencyOutcome, ServerError> {
    let marginal = cross.marginal().clone();
    let attrs: Vec<usize> = marginal.attributes().to_vec();
    let sizes: Vec<usize> = attrs.iter().map(|&a| schema.domain_size(a)).collect();
    let cell_count: usize = sizes.iter().product();

    // Normalize the estimate; negatives (possible for unbiased FO
    // estimates) are clamped first.
    let mut h: Vec<f64> = cross.cells().iter().map(|&c| c.max(0.0)).collect();
    let mass: f64 = h.iter().sum();
    if mass <= 0.0 {
        return Err(ServerError::ZeroMass(attrs));
    }
    h.iter_mut().for_each(|c| *c /= mass);

    let mut tilde: Vec<Vec<f64>> = Vec::with_capacity(attrs.len());
    for (&attr, &u) in attrs.iter().zip(&sizes) {
        let t = attr_marginals
            .get(&attr)
            .ok_or(ServerError::UncoveredAttribute(attr))?;
        if t.len() != u {
            return Err(ServerError::DomainMismatch {
                attr,
                schema: u,
                message: t.len(),
            });
        }
        let total: f64 = t.iter().sum();
        if total <= 0.0 || t.iter().any(|&p| p < 0.0) {
            return Err(ServerError::ZeroMass(vec![attr]));
        }
        tilde.push(t.iter().map(|&p| p / total).collect());
    }

    // stride[i]: distance between consecutive values of attribute i.
    let strides: Vec<usize> = (0..attrs.len())
        .map(|i| sizes[i + 1..].iter().product())
        .collect();
    let marginal_of = |h: &[f64], i: usize| -> Vec<f64> {
        let mut out = vec![0.0; sizes[i]];
        for (cell, &v) in h.iter().enumerate() {
            out[(cell / strides[i]) % sizes[i]] += v;
        }
        out
    };
    let gap = |h: &[f64], tilde: &[Vec<f64>]| -> f64 {
        (0..attrs.len())
            .map(|i| {
                marginal_of(h, i)
                    .iter()
                    .zip(&tilde[i])
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    };

    let mut trace = Vec::new();
    for _ in 0..iterations.max(1) {
        for i in 0..attrs.len() {
            let h_i = marginal_of(&h, i);
            let co_cells = (cell_count / sizes[i]) as f64;
            let bar: Vec<f64> = tilde[i]
                .iter()
                .zip(&h_i)
                .map(|(t, m)| (t + m) / 2.0)
                .collect();
            for (cell, value) in h.iter_mut().enumerate() {
                let v = (cell / strides[i]) % sizes[i];
                *value += (bar[v] - h_i[v]) / co_cells;
            }
            tilde[i] = bar;
        }
        // Clamp and renormalize; this can reintroduce inconsistency, which
        // the next pass absorbs.
        h.iter_mut().for_each(|c| *c = c.max(0.0));
        let total: f64 = h.iter().sum();
        if total <= 0.0 {
            return Err(ServerError::ZeroMass(attrs));
        }
        h.iter_mut().for_each(|c| *c /= total);
        let g = gap(&h, &tilde);
        trace.push(g);
        if g < tolerance {
            break;
        }
    }

    let histogram = ContingencyHistogram::new(
        marginal,
        h.iter().map(|&c| c * n_hat).collect(),
        HistKind::Counts,
        schema,
    )?;
    let attr_out: BTreeMap<usize, Vec<f64>> = attrs
        .iter()
        .zip(tilde)
        .map(|(&a, t)| (a, t))
        .collect();
    Ok(ConsistencyOutcome {
        histogram,
        attr_marginals: attr_out,
        trace,
    })
}
