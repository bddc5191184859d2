//! Context normalization layers.
//!
//! * [`ContextNorm`] (CN): per-(context, channel) batch statistics, a
//!   `1/sqrt(λ_k)` rescale and a per-context affine map.
//! * [`CnxParams`] (CN-X): the same transform with the per-context mean and
//!   variance as trainable parameters.
//! * [`AcnParams`] (ACN): soft contexts from a learned diagonal Gaussian
//!   mixture over per-position channel vectors.
//!
//! Context ids are zero-based and given per sample; every spatial position
//! of a sample shares the sample's context.

mod acn;
mod cn;
mod cnx;

pub use acn::{acn_backward, acn_forward, acn_init, AcnCache, AcnGrads, AcnParams};
pub use cn::{cn_backward, CnCache, CnGrads, ContextNorm};
pub use cnx::{cnx_backward, cnx_forward, CnxCache, CnxGrads, CnxParams};

use crate::error::{Error, Result};

/// Checks that `lambdas` lie on the simplex: positive, summing to one within
/// `1e-9`.
pub(crate) fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Config("need at least one context".into()));
    }
    if let Some(i) = lambdas.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::Config(format!("context {i} has proportion {}", lambdas[i])));
    }
    let total: f64 = lambdas.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("context proportions sum to {total}")));
    }
    Ok(())
}

pub(crate) fn check_ids(ids: &[usize], n: usize, k: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::Shape(format!("{} context ids for a batch of {n}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= k) {
        return Err(Error::Config(format!("context id {bad} outside 0..{k}")));
    }
    Ok(())
}
