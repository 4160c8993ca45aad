//! Differentially private Flajolet-Martin sketches over attribute
//! membership sets, and marginal estimation from merged sketches.
//!
//! Each (attribute, value, repeat) triple holds one integer: the maximum of
//! the keyed geometric hashes of the member record ids, k_p fresh phantom
//! geometrics and a fixed floor. Cardinalities come back through
//! (1+gamma)^alpha with the phantom mass subtracted; intersections are
//! estimated through the complement-union route, so no extra budget is
//! spent after encoding.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::privacy::{self, PrivacyBudget, PrivacyError};

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("gamma must lie in (0,1), got {0}")]
    BadGamma(f64),
    #[error("eps_prime must be positive, got {0}")]
    BadEpsPrime(f64),
    #[error("repeat count must be positive")]
    NoRepeats,
    #[error("phantom count {0} too large to simulate; increase the encoder budget")]
    PhantomCountTooLarge(f64),
    #[error("empty input")]
    Empty,
    #[error("harmonic mean requires positive values, got {0}")]
    NonPositiveValue(f64),
    #[error("attribute {0} missing from sketch set")]
    MissingAttribute(usize),
    #[error("sketch sets disagree on parameters")]
    ParamMismatch,
    #[error("attribute {0} present in more than one sketch set")]
    DuplicateAttribute(usize),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Key material for the keyed geometric hash. Parties derive these from a
/// shared master seed; only the key *indices* ever reach the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashKey(pub u64);

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_to_unit(h: u64) -> f64 {
    // 53 mantissa bits, offset by half an ulp so the result is in (0,1).
    ((h >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Keyed geometric hash: deterministic per (element, key), distributed as
/// Geometric(gamma/(1+gamma)) over a random key.
pub fn hash_geometric(element_id: u64, key: HashKey, gamma: f64) -> u32 {
    let h = mix64(mix64(element_id) ^ key.0);
    let g = privacy::geometric_from_uniform(gamma, hash_to_unit(h));
    g.min(u32::MAX as u64) as u32
}

/// Maximum of `k` Geometric(gamma/(1+gamma)) draws, sampled in O(1) through
/// the inverse CDF of the maximum.
pub fn max_geometric<R: Rng + ?Sized>(k: u64, gamma: f64, rng: &mut R) -> u32 {
    if k == 0 {
        return 0;
    }
    let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
    // P(max <= a) = (1 - (1+gamma)^{-(a+1)})^k; invert at u.
    let tail = -f64::ln_1p(-f64::exp(u.ln() / k as f64)); // -ln(1 - u^(1/k))
    let a = (tail / (1.0 + gamma).ln() - 1.0).ceil();
    if a < 0.0 {
        0
    } else {
        a.min(u32::MAX as f64) as u32
    }
}

/// Parameters shared by every sketch of one encoding pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    pub gamma: f64,
    pub t: u32,
    pub eps_prime: f64,
    pub k_p: u64,
    pub alpha_min: u32,
    pub key_ids: Vec<u32>,
}

impl SketchParams {
    pub fn derive(gamma: f64, t: u32, eps_prime: f64) -> Result<Self, SketchError> {
        if !(0.0..1.0).contains(&gamma) || gamma == 0.0 {
            return Err(SketchError::BadGamma(gamma));
        }
        if eps_prime <= 0.0 {
            return Err(SketchError::BadEpsPrime(eps_prime));
        }
        if t == 0 {
            return Err(SketchError::NoRepeats);
        }
        let k_p_f = (1.0 / eps_prime.exp_m1()).ceil();
        if !(0.0..=1e8).contains(&k_p_f) {
            return Err(SketchError::PhantomCountTooLarge(k_p_f));
        }
        let alpha_min_f = ((1.0 / -f64::exp_m1(-eps_prime)).ln() / (1.0 + gamma).ln()).ceil();
        Ok(Self {
            gamma,
            t,
            eps_prime,
            k_p: k_p_f.max(0.0) as u64,
            alpha_min: alpha_min_f.max(0.0) as u32,
            key_ids: (0..t).collect(),
        })
    }
}

/// One DP FM sketch: max over hashed member ids, phantom draws and the floor.
pub fn dpfm<R: Rng + ?Sized>(
    ids: &[u64],
    params: &SketchParams,
    key: HashKey,
    rng: &mut R,
) -> u32 {
    let alpha_data = ids
        .iter()
        .map(|&id| hash_geometric(id, key, params.gamma))
        .max()
        .unwrap_or(0);
    let alpha_phantom = max_geometric(params.k_p, params.gamma, rng);
    alpha_data.max(alpha_phantom).max(params.alpha_min)
}

/// Maximum of merged sketches; FM sketches are mergeable by max.
pub fn merge_max(alphas: &[u32]) -> Result<u32, SketchError> {
    alphas.iter().copied().max().ok_or(SketchError::Empty)
}

/// k / sum(1/x_i).
pub fn harmonic_mean(values: &[f64]) -> Result<f64, SketchError> {
    if values.is_empty() {
        return Err(SketchError::Empty);
    }
    let mut denom = 0.0;
    for &v in values {
        if v <= 0.0 {
            return Err(SketchError::NonPositiveValue(v));
        }
        denom += 1.0 / v;
    }
    Ok(values.len() as f64 / denom)
}

/// Sketches for all values of one attribute: a (domain x t) matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSketches {
    pub domain: usize,
    /// Row-major by value: alphas[v * t + h].
    pub alphas: Vec<u32>,
}

impl AttributeSketches {
    pub fn alpha(&self, value: usize, repeat: usize, t: usize) -> u32 {
        self.alphas[value * t + repeat]
    }
}

/// The complete sketch payload of one encoding pass, keyed by attribute id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSet {
    pub params: SketchParams,
    pub attrs: BTreeMap<usize, AttributeSketches>,
}

impl SketchSet {
    pub fn sketch_count(&self) -> usize {
        self.attrs.values().map(|a| a.alphas.len()).sum()
    }

    /// Merges per-party sketch sets; attribute ids must be disjoint and the
    /// parameters identical.
    pub fn merge(sets: &[SketchSet]) -> Result<SketchSet, SketchError> {
        let first = sets.first().ok_or(SketchError::Empty)?;
        let mut out = SketchSet {
            params: first.params.clone(),
            attrs: BTreeMap::new(),
        };
        for set in sets {
            if set.params != first.params {
                return Err(SketchError::ParamMismatch);
            }
            for (&attr, sk) in &set.attrs {
                if out.attrs.insert(attr, sk.clone()).is_some() {
                    return Err(SketchError::DuplicateAttribute(attr));
                }
            }
        }
        Ok(out)
    }
}

/// Membership id sets per value of one column: ids[v] lists the records
/// taking value v.
pub fn membership_sets(column: &[u32], domain: usize) -> Vec<Vec<u64>> {
    let mut sets = vec![Vec::new(); domain];
    for (row, &v) in column.iter().enumerate() {
        sets[v as usize].push(row as u64);
    }
    sets
}

/// Encodes a party's columns into a [`SketchSet`].
///
/// `d_global` is the total attribute count across all parties: the
/// per-repeat budget derivation composes over every sketch that any party
/// releases. The stage spend is a single ledger entry recorded by the
/// orchestrator, not here. Phantom randomness is drawn from a stream derived
/// per (attribute, value, repeat), so results do not depend on evaluation
/// order.
pub fn loc_enc_sketch(
    columns: &[(usize, usize, Vec<u32>)], // (attr id, domain, values)
    budget: PrivacyBudget,
    gamma: f64,
    t: u32,
    keys: &[HashKey],
    d_global: u32,
    phantom_seed: u64,
) -> Result<SketchSet, SketchError> {
    let eps_prime = privacy::per_repeat_epsilon(budget.epsilon, budget.delta, t, d_global)?;
    let params = SketchParams::derive(gamma, t, eps_prime)?;
    if keys.len() != t as usize {
        return Err(SketchError::ParamMismatch);
    }
    let mut attrs = BTreeMap::new();
    for (attr, domain, column) in columns {
        let sets = membership_sets(column, *domain);
        let mut alphas = vec![0u32; domain * t as usize];
        for (v, ids) in sets.iter().enumerate() {
            for (h, &key) in keys.iter().enumerate() {
                let mut unit_rng = unit_rng(phantom_seed, *attr, v, h);
                alphas[v * t as usize + h] = dpfm(ids, &params, key, &mut unit_rng);
            }
        }
        attrs.insert(
            *attr,
            AttributeSketches {
                domain: *domain,
                alphas,
            },
        );
    }
    Ok(SketchSet { params, attrs })
}

fn unit_rng(seed: u64, attr: usize, value: usize, repeat: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let s = mix64(seed ^ mix64(attr as u64) ^ mix64((value as u64) << 20) ^ ((repeat as u64) << 40));
    rand_chacha::ChaCha8Rng::seed_from_u64(s)
}

/// Estimated contingency cells for a marginal over sketched attributes, in
/// row-major order over the sketch domains (ascending attribute id).
///
/// Per cell and repeat, the union of the complement value sets is sketched
/// by the max over all other-value sketches. The t per-repeat cardinality
/// reads (1+gamma)^alpha_h combine by harmonic mean (the max alone
/// overshoots by a Gumbel factor; the reciprocal mean cancels it), phantom
/// mass is subtracted, and the cell is the sanitized count minus the union
/// estimate, clamped at zero. Pure post-processing.
pub fn car_est_sketch(
    attrs: &[usize],
    set: &SketchSet,
    n_hat: f64,
) -> Result<Vec<f64>, SketchError> {
    let t = set.params.t as usize;
    let mut sketches = Vec::with_capacity(attrs.len());
    let mut sizes = Vec::with_capacity(attrs.len());
    for &a in attrs {
        let sk = set
            .attrs
            .get(&a)
            .ok_or(SketchError::MissingAttribute(a))?;
        sizes.push(sk.domain);
        sketches.push(sk);
    }
    // Top-two maxima per (attribute, repeat) make each complement max O(1):
    // the max over all values but v is the best unless v holds it.
    let mut top: Vec<Vec<(u32, u32, usize)>> = Vec::with_capacity(attrs.len());
    for sk in &sketches {
        let mut per_repeat = vec![(0u32, 0u32, usize::MAX); t]; // (best, second, arg_best)
        for v in 0..sk.domain {
            for (h, slot) in per_repeat.iter_mut().enumerate() {
                let alpha = sk.alpha(v, h, t);
                if slot.2 == usize::MAX {
                    *slot = (alpha, 0, v);
                } else if alpha > slot.0 {
                    *slot = (alpha, slot.0, v);
                } else if alpha > slot.1 {
                    slot.1 = alpha;
                }
            }
        }
        top.push(per_repeat);
    }
    let cell_count: usize = sizes.iter().product();
    let phantom_mass: f64 = sizes
        .iter()
        .map(|&u| (u.saturating_sub(1)) as f64)
        .sum::<f64>()
        * set.params.k_p as f64;
    let one_plus_gamma = 1.0 + set.params.gamma;
    let discretization_factor = set.params.gamma / one_plus_gamma.ln();
    let mut cells = Vec::with_capacity(cell_count);
    let mut tuple = vec![0usize; attrs.len()];
    let mut maxima = vec![0.0f64; t];
    for cell in 0..cell_count {
        // decode mixed-radix cell -> tuple
        let mut rest = cell;
        for (i, &u) in sizes.iter().enumerate().rev() {
            tuple[i] = rest % u;
            rest /= u;
        }
        let mut any = false;
        for h in 0..t {
            let mut m = 0u32;
            let mut seen = false;
            for (i, sk) in sketches.iter().enumerate() {
                if sk.domain <= 1 {
                    continue; // no complement values to union over
                }
                let (best, second, argbest) = top[i][h];
                let comp = if argbest == tuple[i] { second } else { best };
                m = m.max(comp);
                seen = true;
            }
            if seen {
                maxima[h] = one_plus_gamma.powi(m as i32);
                any = true;
            }
        }
        let union_est = if any {
            // Integer truncation of alpha shrinks the reciprocal-mean read
            // by ln(1+gamma)/gamma on average; undo it before removing the
            // phantom mass.
            harmonic_mean(&maxima)? * discretization_factor - phantom_mass
        } else {
            0.0
        };
        cells.push((n_hat - union_est).max(0.0));
    }
    Ok(cells)
}
