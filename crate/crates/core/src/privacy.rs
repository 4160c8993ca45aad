//! Noise mechanisms, privacy-budget planning and the spend ledger.
//!
//! Every sampler takes an explicit RNG so statistical tests replay
//! deterministically. Composition helpers follow the pure-DP-to-RDP bound
//! (`rdp_compose`) and its inverse used by the sketch encoder
//! (`per_repeat_epsilon`). Gaussian noise is calibrated through the zCDP
//! route, which stays valid for stage budgets above 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("delta must lie in (0,1), got {0}")]
    BadDelta(f64),
    #[error("RDP composition inapplicable: log(1/delta)={0:.4} < count*eps^2={1:.4}")]
    CompositionInapplicable(f64, f64),
    #[error("budget fractions must be non-negative and sum to 1, got sum {0}")]
    BadFractions(f64),
    #[error("noisy-count sub-share must lie in [0,1], got {0}")]
    BadSubShare(f64),
    #[error("budget too small: calibrated noise scale overflows ({0})")]
    BudgetTooSmall(f64),
    #[error("ledger overspent: {spent:.6} {kind} spent against budget {budget:.6}")]
    Overspend {
        kind: &'static str,
        spent: f64,
        budget: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if epsilon <= 0.0 {
            return Err(PrivacyError::NonPositiveEpsilon(epsilon));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(PrivacyError::BadDelta(delta));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Laplace(0, scale) sample via inverse CDF.
pub fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64, PrivacyError> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(PrivacyError::NonPositiveScale(scale));
    }
    let u: f64 = rng.random::<f64>() - 0.5;
    Ok(-scale * u.signum() * (1.0 - 2.0 * u.abs()).ln())
}

/// N(0, sigma^2) sample.
pub fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<f64, PrivacyError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(PrivacyError::NonPositiveScale(sigma));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(sigma * z)
}

/// Geometric(gamma/(1+gamma)) on {0,1,2,...} via inverse CDF; the hashed
/// sketch values and the phantom elements both draw from this law.
pub fn geometric<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<u64, PrivacyError> {
    if gamma <= 0.0 || gamma >= 1.0 {
        return Err(PrivacyError::NonPositiveScale(gamma));
    }
    let u: f64 = rng.random::<f64>();
    Ok(geometric_from_uniform(gamma, u))
}

/// Deterministic inverse-CDF transform shared with the keyed hash path.
pub fn geometric_from_uniform(gamma: f64, u: f64) -> u64 {
    // P(G >= k) = (1+gamma)^{-k}; u in (0,1].
    let u = u.clamp(f64::MIN_POSITIVE, 1.0);
    let g = u.ln() / -(1.0 + gamma).ln();
    if g < 0.0 {
        0
    } else {
        g as u64
    }
}

/// Count plus Laplace(1/eps) noise; sensitivity-1 release of n.
pub fn sanitize_count<R: Rng + ?Sized>(
    n: u64,
    eps: f64,
    rng: &mut R,
    ledger: &mut SpendLedger,
    stage: &str,
) -> Result<f64, PrivacyError> {
    if eps <= 0.0 {
        return Err(PrivacyError::NonPositiveEpsilon(eps));
    }
    let noisy = n as f64 + laplace(1.0 / eps, rng)?;
    ledger.record(stage, eps, 0.0, "laplace");
    Ok(noisy)
}

/// Composed epsilon at the given delta for `count` mechanisms each
/// eps_each-DP: 4*eps_each*sqrt(2*count*log(1/delta)).
pub fn rdp_compose(count: u32, eps_each: f64, delta: f64) -> Result<f64, PrivacyError> {
    if eps_each <= 0.0 {
        return Err(PrivacyError::NonPositiveEpsilon(eps_each));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(PrivacyError::BadDelta(delta));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let need = count as f64 * eps_each * eps_each;
    if log_inv_delta < need {
        return Err(PrivacyError::CompositionInapplicable(log_inv_delta, need));
    }
    Ok(4.0 * eps_each * (2.0 * count as f64 * log_inv_delta).sqrt())
}

/// Per-repeat budget for a sketch encoder running t repeats over d
/// attributes: eps / (4*sqrt(t*d*log(1/delta))).
pub fn per_repeat_epsilon(
    eps: f64,
    delta: f64,
    t: u32,
    d: u32,
) -> Result<f64, PrivacyError> {
    if eps <= 0.0 {
        return Err(PrivacyError::NonPositiveEpsilon(eps));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(PrivacyError::BadDelta(delta));
    }
    if t == 0 || d == 0 {
        return Err(PrivacyError::NonPositiveEpsilon(0.0));
    }
    let log_inv_delta = (1.0 / delta).ln();
    Ok(eps / (4.0 * (t as f64 * d as f64 * log_inv_delta).sqrt()))
}

/// zCDP order of an (eps, delta) budget:
/// rho = (sqrt(log(1/delta)+eps) - sqrt(log(1/delta)))^2.
fn zcdp_rho(eps: f64, delta: f64) -> Result<f64, PrivacyError> {
    if eps <= 0.0 {
        return Err(PrivacyError::NonPositiveEpsilon(eps));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(PrivacyError::BadDelta(delta));
    }
    let l = (1.0 / delta).ln();
    Ok(((l + eps).sqrt() - l.sqrt()).powi(2))
}

/// Gaussian sigma for an (eps, delta) release of an L2-sensitivity-`sens`
/// quantity, through the zCDP conversion: sigma = sens/sqrt(2 rho). Valid
/// for budgets above 1, unlike the classic analytic formula.
pub fn gaussian_sigma(eps: f64, delta: f64, sens: f64) -> Result<f64, PrivacyError> {
    gaussian_sigma_composed(eps, delta, sens, 1)
}

/// Gaussian sigma when `releases` sensitivity-`sens` quantities must
/// jointly fit in (eps, delta): each release gets rho/releases, so
/// sigma = sens * sqrt(releases / (2 rho)).
pub fn gaussian_sigma_composed(
    eps: f64,
    delta: f64,
    sens: f64,
    releases: usize,
) -> Result<f64, PrivacyError> {
    let rho = zcdp_rho(eps, delta)?;
    let sigma = sens * (releases.max(1) as f64 / (2.0 * rho)).sqrt();
    if !sigma.is_finite() || sigma > 1e15 {
        return Err(PrivacyError::BudgetTooSmall(sigma));
    }
    Ok(sigma)
}

/// Expected absolute value of N(0, sigma^2); the `g` fed to the
/// theta-usefulness filter.
pub fn expected_abs_gaussian(sigma: f64) -> f64 {
    sigma * (2.0 / std::f64::consts::PI).sqrt()
}

/// How the total (eps, delta) is divided across pipeline stages.
///
/// Fractions apply to epsilon. Delta is split between the two stages that
/// consume it (local MRFs and the encoder) in proportion to their epsilon
/// fractions; Laplace stages spend no delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub loc_mrf: f64,
    pub loc_enc: f64,
    pub binning: f64,
    /// Sub-share of the loc_enc fraction spent on the noisy record count.
    pub noisy_count_share: f64,
    pub parties: usize,
}

impl BudgetPlan {
    pub fn new(
        loc_mrf: f64,
        loc_enc: f64,
        binning: f64,
        noisy_count_share: f64,
        parties: usize,
    ) -> Result<Self, PrivacyError> {
        let sum = loc_mrf + loc_enc + binning;
        if loc_mrf < 0.0 || loc_enc < 0.0 || binning < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(PrivacyError::BadFractions(sum));
        }
        if !(0.0..=1.0).contains(&noisy_count_share) {
            return Err(PrivacyError::BadSubShare(noisy_count_share));
        }
        Ok(Self {
            loc_mrf,
            loc_enc,
            binning,
            noisy_count_share,
            parties,
        })
    }

    /// 40% local MRFs, 40% encoder (10% of which buys the noisy count),
    /// 20% binning value distributions.
    pub fn experiment_default(parties: usize) -> Self {
        Self {
            loc_mrf: 0.4,
            loc_enc: 0.4,
            binning: 0.2,
            noisy_count_share: 0.1,
            parties,
        }
    }

    /// The eps/2m-per-party, eps/2-encoder split, with no binning stage.
    pub fn halved(parties: usize) -> Self {
        Self {
            loc_mrf: 0.5,
            loc_enc: 0.5,
            binning: 0.0,
            noisy_count_share: 0.1,
            parties,
        }
    }

    /// Variant of the default used when binning is disabled: its fraction
    /// moves to the encoder.
    pub fn without_binning(parties: usize) -> Self {
        Self {
            loc_mrf: 0.4,
            loc_enc: 0.6,
            binning: 0.0,
            noisy_count_share: 0.1,
            parties,
        }
    }

    /// Concrete per-stage budgets for a run.
    ///
    /// `binned_attr_count` is the number of attributes whose bins hold more
    /// than one value; only those carry value-distribution noise. When it is
    /// zero the binning fraction folds into the encoder.
    pub fn resolve(
        &self,
        total: PrivacyBudget,
        binned_attr_count: usize,
    ) -> Result<StageBudgets, PrivacyError> {
        let mut enc_fraction = self.loc_enc;
        let mut bin_fraction = self.binning;
        if binned_attr_count == 0 {
            enc_fraction += bin_fraction;
            bin_fraction = 0.0;
        }
        let denom = self.loc_mrf + enc_fraction;
        if denom <= 0.0 {
            return Err(PrivacyError::BadFractions(denom));
        }
        let mrf_total_eps = self.loc_mrf * total.epsilon;
        let enc_total_eps = enc_fraction * total.epsilon;
        let count_eps = self.noisy_count_share * enc_total_eps;
        Ok(StageBudgets {
            loc_mrf_per_party: PrivacyBudget {
                epsilon: mrf_total_eps / self.parties as f64,
                delta: self.loc_mrf / denom * total.delta / self.parties as f64,
            },
            loc_enc: PrivacyBudget {
                epsilon: enc_total_eps - count_eps,
                delta: enc_fraction / denom * total.delta,
            },
            noisy_count_eps: count_eps,
            binning_eps_per_attr: if bin_fraction > 0.0 {
                bin_fraction * total.epsilon / binned_attr_count as f64
            } else {
                0.0
            },
            binned_attr_count,
            parties: self.parties,
        })
    }
}

/// Resolved absolute budgets per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageBudgets {
    pub loc_mrf_per_party: PrivacyBudget,
    pub loc_enc: PrivacyBudget,
    pub noisy_count_eps: f64,
    pub binning_eps_per_attr: f64,
    pub binned_attr_count: usize,
    pub parties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendEntry {
    pub stage: String,
    pub epsilon: f64,
    pub delta: f64,
    pub rule: String,
}

/// Append-only log of privacy spends.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpendLedger {
    entries: Vec<SpendEntry>,
}

impl SpendLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &str, epsilon: f64, delta: f64, rule: &str) {
        self.entries.push(SpendEntry {
            stage: stage.to_string(),
            epsilon,
            delta,
            rule: rule.to_string(),
        });
    }

    pub fn entries(&self) -> &[SpendEntry] {
        &self.entries
    }

    pub fn total_epsilon(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon).sum()
    }

    pub fn total_delta(&self) -> f64 {
        self.entries.iter().map(|e| e.delta).sum()
    }

    /// Errors when the recorded total exceeds the budget beyond float slack.
    pub fn check_within(&self, budget: PrivacyBudget) -> Result<(), PrivacyError> {
        let eps_slack = 1e-9 * budget.epsilon.max(1.0);
        if self.total_epsilon() > budget.epsilon + eps_slack {
            return Err(PrivacyError::Overspend {
                kind: "epsilon",
                spent: self.total_epsilon(),
                budget: budget.epsilon,
            });
        }
        let delta_slack = 1e-12 * budget.delta.max(f64::MIN_POSITIVE);
        if self.total_delta() > budget.delta + delta_slack {
            return Err(PrivacyError::Overspend {
                kind: "delta",
                spent: self.total_delta(),
                budget: budget.delta,
            });
        }
        Ok(())
    }
}
