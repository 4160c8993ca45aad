//! Equal-width attribute binning and per-bin value distributions.
//!
//! The bin map depends only on domain sizes, never on data, so applying it
//! costs no privacy. Value distributions (which do look at data) are built
//! by the party pipeline with Laplace noise and travel to the server inside
//! the binning spec for histogram recovery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinningError {
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("value {0} out of domain [0,{1})")]
    OutOfDomain(u32, usize),
    #[error("attribute {0} missing from binning spec")]
    MissingAttribute(usize),
    #[error("bin distribution for attribute {0}, bin {1} has wrong length")]
    BadDistribution(usize, usize),
}

/// Number of bins an attribute of domain `u` ends up with: attributes no
/// wider than `b` keep their identity map.
pub fn binned_domain(u: usize, b: usize) -> usize {
    u.min(b)
}

/// Equal-width bin of a value: floor(value * b / u), identity when u <= b.
pub fn bin_of(value: u32, u: usize, b: usize) -> u32 {
    if u <= b {
        value
    } else {
        ((value as usize * b) / u) as u32
    }
}

/// Raw values allocated to the given bin, ascending.
pub fn bin_values(u: usize, b: usize, bin: u32) -> Vec<u32> {
    (0..u as u32).filter(|&v| bin_of(v, u, b) == bin).collect()
}

/// Position of a value inside its bin's ascending value list.
pub fn index_in_bin(value: u32, u: usize, b: usize) -> usize {
    let bin = bin_of(value, u, b);
    bin_values(u, b, bin)
        .iter()
        .position(|&v| v == value)
        .expect("value maps into its own bin")
}

/// Per-bin value distribution of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBinning {
    pub raw_domain: usize,
    pub bins: usize,
    /// distributions[bin][index-in-bin], each non-negative summing to 1.
    pub distributions: Vec<Vec<f64>>,
}

impl AttributeBinning {
    pub fn validate(&self, attr: usize) -> Result<(), BinningError> {
        if self.bins == 0 {
            return Err(BinningError::ZeroBins);
        }
        for bin in 0..self.bins {
            let values = bin_values(self.raw_domain, self.bins, bin as u32);
            let dist = self
                .distributions
                .get(bin)
                .ok_or(BinningError::BadDistribution(attr, bin))?;
            if dist.len() != values.len() {
                return Err(BinningError::BadDistribution(attr, bin));
            }
            let sum: f64 = dist.iter().sum();
            if dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(BinningError::BadDistribution(attr, bin));
            }
        }
        Ok(())
    }
}

/// Binning state for a set of attributes, keyed by global attribute id.
/// Attributes absent from the map were not binned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub attrs: BTreeMap<usize, AttributeBinning>,
}

impl BinningSpec {
    pub fn validate(&self) -> Result<(), BinningError> {
        for (&attr, binning) in &self.attrs {
            binning.validate(attr)?;
        }
        Ok(())
    }

    pub fn merge(parts: &[BinningSpec]) -> BinningSpec {
        let mut out = BinningSpec::default();
        for p in parts {
            out.attrs.extend(p.attrs.iter().map(|(k, v)| (*k, v.clone())));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_width_example() {
        // u=8, b=4: pairs of consecutive values share a bin.
        let got: Vec<u32> = (0..8).map(|v| bin_of(v, 8, 4)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(bin_values(8, 4, 2), vec![4, 5]);
        assert_eq!(index_in_bin(5, 8, 4), 1);
    }

    #[test]
    fn narrow_attributes_keep_identity() {
        let got: Vec<u32> = (0..2).map(|v| bin_of(v, 2, 4)).collect();
        assert_eq!(got, vec![0, 1]);
        assert_eq!(binned_domain(2, 4), 2);
        assert_eq!(binned_domain(10, 4), 4);
    }

    #[test]
    fn uneven_widths_partition_the_domain() {
        // u=10, b=4: bins of sizes 3,2,3,2 still cover every value once.
        let mut seen = vec![0usize; 4];
        for v in 0..10u32 {
            let b = bin_of(v, 10, 4);
            assert!(b < 4);
            seen[b as usize] += 1;
        }
        assert_eq!(seen.iter().sum::<usize>(), 10);
        assert!(seen.iter().all(|&c| c >= 2));
        // Bins are contiguous and monotone.
        let bins: Vec<u32> = (0..10).map(|v| bin_of(v, 10, 4)).collect();
        assert!(bins.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spec_validation() {
        let good = AttributeBinning {
            raw_domain: 4,
            bins: 2,
            distributions: vec![vec![0.5, 0.5], vec![0.25, 0.75]],
        };
        assert!(good.validate(0).is_ok());
        let bad = AttributeBinning {
            raw_domain: 4,
            bins: 2,
            distributions: vec![vec![0.5, 0.5], vec![0.5, 0.75]],
        };
        assert!(bad.validate(0).is_err());
    }
}
