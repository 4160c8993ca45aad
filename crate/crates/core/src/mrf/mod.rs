//! Discrete Markov random field engine shared by the local and global
//! pipelines: attribute graphs with min-fill triangulation and junction
//! trees, R-scores for edge ranking, theta-usefulness filtering, parameter
//! fitting against target marginals, exact marginal inference and forward
//! sampling.

mod graph;
mod model;

pub use graph::{greedy_edge_selection, max_clique_domain, triangulate, AttributeGraph, Triangulated};
pub use model::{FitOptions, FitReport, MrfModel};

use rand::Rng;
use thiserror::Error;

use crate::data::{ContingencyHistogram, DataError, Marginal, Schema};
use crate::privacy::{self, PrivacyError};

#[derive(Debug, Error)]
pub enum MrfError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("R-score needs a 2-way histogram, got arity {0}")]
    NotPairwise(usize),
    #[error("histogram has no mass")]
    ZeroMass,
    #[error("model is unnormalizable")]
    Unnormalizable,
    #[error("marginal {0:?} spans attributes outside the model schema")]
    OutsideSchema(Vec<usize>),
    #[error("target marginal {0:?} is not part of the model")]
    UnknownTarget(Vec<usize>),
    #[error("theta layout does not match the model's marginal set")]
    ThetaShapeMismatch,
}

/// Noisy correlation score of an attribute pair: (n/2) times the L1 gap
/// between the joint and the product of its marginals, plus N(0, sigma_r^2).
/// With sigma_r = 0 the exact score is returned.
pub fn r_score<R: Rng + ?Sized>(
    pair_hist: &ContingencyHistogram,
    n: f64,
    sigma_r: f64,
    schema: &Schema,
    rng: &mut R,
) -> Result<f64, MrfError> {
    let m = pair_hist.marginal();
    if m.arity() != 2 {
        return Err(MrfError::NotPairwise(m.arity()));
    }
    let total = pair_hist.total();
    if total <= 0.0 {
        return Err(MrfError::ZeroMass);
    }
    let (a, b) = (m.attributes()[0], m.attributes()[1]);
    let (ua, ub) = (schema.domain_size(a), schema.domain_size(b));
    let mut pa = vec![0.0; ua];
    let mut pb = vec![0.0; ub];
    for va in 0..ua {
        for vb in 0..ub {
            let p = pair_hist.cells()[va * ub + vb] / total;
            pa[va] += p;
            pb[vb] += p;
        }
    }
    let mut l1 = 0.0;
    for va in 0..ua {
        for vb in 0..ub {
            let joint = pair_hist.cells()[va * ub + vb] / total;
            l1 += (joint - pa[va] * pb[vb]).abs();
        }
    }
    let noise = if sigma_r > 0.0 {
        privacy::gaussian(sigma_r, rng)?
    } else {
        0.0
    };
    Ok(n / 2.0 * l1 + noise)
}

/// Average-count filter: a marginal is useful when n_hat / prod(u) is at
/// least theta times the expected noise magnitude, so the signal tolerates
/// the noise about to be added.
pub fn theta_useful(
    marginal: &Marginal,
    n_hat: f64,
    theta: f64,
    g: f64,
    schema: &Schema,
) -> Result<bool, MrfError> {
    let cells = marginal.cell_count(schema)? as f64;
    Ok(n_hat / cells >= theta * g)
}
