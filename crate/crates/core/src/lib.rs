//! Building blocks for differentially private synthesis of vertically
//! partitioned tabular data: integer-coded schemas and contingency
//! histograms, calibrated noise mechanisms with a spend ledger, DP
//! Flajolet-Martin sketches, a generalized-randomized-response frequency
//! oracle, a discrete Markov random field engine, attribute binning and
//! the party-to-server message format.

pub mod binning;
pub mod data;
pub mod fo;
pub mod message;
pub mod mrf;
pub mod privacy;
pub mod sketch;

pub use data::{cell_index, cell_tuple, compute_histogram, tvd};
pub use data::{ContingencyHistogram, DataError, Dataset, HistKind, Marginal, Schema};
