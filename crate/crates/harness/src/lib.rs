//! Experiment harness: configuration, CSV and domain-file ingestion,
//! attribute splitting, the end-to-end pipeline runner, the independent
//! baseline, l-way TVD metrics and sweep orchestration.
//!
//! This is the only crate holding both party and server capabilities; the
//! two sides exchange nothing but serialized party messages.

pub mod config;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod planted;

pub use config::{Assignment, BinsChoice, EncoderChoice, PlanKind, RunConfig};
pub use experiment::{baseline_independent, run_experiment, run_sweep, RunOutcome, SweepRow};
pub use metrics::{eval_lway_tvd, MetricsReport, TvdSummary};
pub use planted::{planted_dataset, PlantedConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("privacy budget overspent: {0}")]
    Overspend(String),
    #[error(transparent)]
    Privacy(#[from] vertimrf_core::privacy::PrivacyError),
    #[error(transparent)]
    Data(#[from] vertimrf_core::data::DataError),
    #[error(transparent)]
    Party(#[from] vertimrf_party::PartyError),
    #[error(transparent)]
    Server(#[from] vertimrf_server::ServerError),
    #[error(transparent)]
    Message(#[from] vertimrf_core::message::MessageError),
    #[error(transparent)]
    Mrf(#[from] vertimrf_core::mrf::MrfError),
    #[error("config error: {0}")]
    Config(String),
    #[error("csv error at {path}: {detail}")]
    Csv { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("evaluation error: {0}")]
    Eval(String),
}

/// Derives a stream seed from the master seed; every consumer of
/// randomness gets its own tag so runs replay exactly.
pub fn subseed(master: u64, tag: u64) -> u64 {
    let mut x = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
