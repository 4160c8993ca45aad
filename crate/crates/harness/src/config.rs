//! Run configuration: JSON-loadable, with CLI overrides layered on top.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use vertimrf_core::data::Schema;
use vertimrf_core::privacy::BudgetPlan;

use crate::planted::PlantedConfig;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    Fm,
    Fo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Deal attributes round robin: party i gets attributes i, i+m, ...
    Uniform,
    /// Explicit attribute index lists, one per party; must partition the
    /// schema.
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinsChoice {
    /// No binning for all-binary schemas, 4 bins otherwise.
    Auto,
    /// Never bin.
    Off,
    /// Fixed equal-width bin count.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// 40% local MRFs / 40% encoder (10% of it for the count) / 20%
    /// binning; the binning share folds into the encoder when binning is
    /// off.
    ExperimentDefault,
    /// eps/2m per party for local MRFs, eps/2 for the encoder.
    Halved,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input CSV; when absent the planted generator is used.
    pub input: Option<PathBuf>,
    /// Domain JSON describing attributes (required with `input`).
    pub domain: Option<PathBuf>,
    pub planted: Option<PlantedConfig>,
    pub parties: usize,
    pub assignment: Assignment,
    pub encoder: EncoderChoice,
    pub epsilon: f64,
    /// Defaults to 1/n.
    pub delta: Option<f64>,
    pub plan: PlanKind,
    pub t: u32,
    pub gamma: f64,
    pub bins: BinsChoice,
    pub tau: usize,
    pub d_c: f64,
    pub theta: f64,
    pub refine_rounds: usize,
    pub refine_batch: usize,
    pub opt_rounds: usize,
    pub opt_batch: usize,
    pub add_threshold: f64,
    pub seed: u64,
    /// Worker threads for the party phase; defaults to VERTIMRF_THREADS
    /// or 1.
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub eval_l: Vec<usize>,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            domain: None,
            planted: None,
            parties: 2,
            assignment: Assignment::Uniform,
            encoder: EncoderChoice::Fm,
            epsilon: 0.8,
            delta: None,
            plan: PlanKind::ExperimentDefault,
            t: 2000,
            gamma: 0.1,
            bins: BinsChoice::Auto,
            tau: 100_000,
            d_c: 50.0,
            theta: 6.0,
            refine_rounds: 3,
            refine_batch: 8,
            opt_rounds: 10,
            opt_batch: 8,
            add_threshold: 0.01,
            seed: 0,
            threads: None,
            out_dir: None,
            eval_l: vec![3, 4, 5],
            eval_samples: 300,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn resolved_threads(&self) -> usize {
        self.threads
            .or_else(|| {
                std::env::var("VERTIMRF_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(1)
            .max(1)
    }

    /// Effective bin count for the given schema.
    pub fn resolved_bins(&self, schema: &Schema) -> Option<usize> {
        match self.bins {
            BinsChoice::Off => None,
            BinsChoice::Fixed(b) => Some(b.max(1)),
            BinsChoice::Auto => {
                if schema.domain_sizes().iter().all(|&u| u <= 2) {
                    None
                } else {
                    Some(4)
                }
            }
        }
    }

    pub fn budget_plan(&self, binning_active: bool) -> BudgetPlan {
        match (self.plan, binning_active) {
            (PlanKind::ExperimentDefault, true) => BudgetPlan::experiment_default(self.parties),
            (PlanKind::ExperimentDefault, false) => BudgetPlan::without_binning(self.parties),
            (PlanKind::Halved, _) => BudgetPlan::halved(self.parties),
        }
    }
}

/// Resolves the attribute assignment into one index list per party,
/// validating that the lists partition the schema.
pub fn resolve_assignment(
    assignment: &Assignment,
    d: usize,
    parties: usize,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    if parties == 0 || parties > d {
        return Err(HarnessError::Config(format!(
            "party count {parties} must be in [1, {d}]"
        )));
    }
    match assignment {
        Assignment::Uniform => {
            let mut out = vec![Vec::new(); parties];
            for a in 0..d {
                out[a % parties].push(a);
            }
            Ok(out)
        }
        Assignment::Explicit(lists) => {
            if lists.len() != parties {
                return Err(HarnessError::Config(format!(
                    "assignment has {} lists for {} parties",
                    lists.len(),
                    parties
                )));
            }
            let mut seen = vec![false; d];
            for list in lists {
                for &a in list {
                    if a >= d {
                        return Err(HarnessError::Config(format!(
                            "attribute index {a} out of range"
                        )));
                    }
                    if seen[a] {
                        return Err(HarnessError::Config(format!(
                            "attribute {a} assigned twice"
                        )));
                    }
                    seen[a] = true;
                }
            }
            if let Some(a) = seen.iter().position(|&s| !s) {
                return Err(HarnessError::Config(format!("attribute {a} unassigned")));
            }
            let mut out = lists.clone();
            for list in &mut out {
                list.sort_unstable();
            }
            Ok(out)
        }
    }
}
