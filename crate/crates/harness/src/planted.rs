//! Seeded generator of binary tables with planted pairwise couplings, the
//! desk-scale stand-in for external benchmark datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vertimrf_core::data::{Dataset, Schema};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n: usize,
    pub d: usize,
    /// (source, target, strength in [0,1]): target copies source with
    /// probability (1+strength)/2.
    pub couplings: Vec<(usize, usize, f64)>,
    /// Per-attribute P(value = 1); defaults to a fixed varied pattern.
    pub biases: Option<Vec<f64>>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        // A chain 3 <- 0 -> 1 -> 4: under the {0,1,2}/{3,4,5} split the
        // two strong couplings (0,3) and (1,4) are cross-party while the
        // chain interior stays local; splits grouping {0,1,3,4} keep the
        // whole chain inside one party.
        Self {
            n: 20_000,
            d: 6,
            couplings: vec![(0, 3, 0.8), (0, 1, 0.6), (1, 4, 0.8)],
            biases: None,
        }
    }
}

pub fn planted_dataset(config: &PlantedConfig, seed: u64) -> Result<Dataset, HarnessError> {
    if config.d == 0 {
        return Err(HarnessError::Config("planted d must be positive".into()));
    }
    for &(a, b, rho) in &config.couplings {
        if a >= config.d || b >= config.d || a == b {
            return Err(HarnessError::Config(format!(
                "bad coupling ({a},{b}) for d={}",
                config.d
            )));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(HarnessError::Config(format!(
                "coupling strength {rho} outside [0,1]"
            )));
        }
    }
    let biases: Vec<f64> = match &config.biases {
        Some(b) => {
            if b.len() != config.d {
                return Err(HarnessError::Config(format!(
                    "{} biases for d={}",
                    b.len(),
                    config.d
                )));
            }
            b.clone()
        }
        None => (0..config.d).map(|i| 0.3 + 0.05 * (i % 9) as f64).collect(),
    };
    let schema = Schema::from_sizes(&vec![2; config.d])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let mut row: Vec<u32> = biases
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1 } else { 0 })
            .collect();
        for &(a, b, rho) in &config.couplings {
            let agree = rng.random::<f64>() < (1.0 + rho) / 2.0;
            row[b] = if agree { row[a] } else { 1 - row[a] };
        }
        rows.push(row);
    }
    Ok(Dataset::new(schema, rows)?)
}
