//! Baseline normalizers: batch, layer, mode and mixture normalization.

mod batch;
mod layer;
mod mixture;
mod mode;

pub use batch::{bn_backward, BatchNorm, BnCache, BnGrads};
pub use layer::{ln_backward, ln_forward, LayerNorm, LnCache, LnGrads};
pub use mixture::{
    mixnorm_backward, mixnorm_forward, mixnorm_forward_frozen, MixNorm, MixNormCache, MixNormGrads,
};
pub use mode::{modenorm_backward, ModeNorm, ModeNormCache, ModeNormGrads};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default numerical guard added to variances.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default running-statistic momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// `μ̄ ← α μ̄ + (1 − α) μ_B`, applied elementwise.
pub(crate) fn ema(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

pub(crate) fn check_len(t: &Tensor, len: usize, what: &str) -> Result<()> {
    if t.len() != len {
        return Err(Error::Shape(format!("{what} has {} entries, expected {len}", t.len())));
    }
    Ok(())
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn check_params(momentum: f64, eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("epsilon {eps} must be non-negative")));
    }
    Ok(())
}

/// Backward pass of a plain standardization `z = (x − μ_g) / sqrt(σ²_g + ε)`
/// where the group `g` of activation `(n, c, ·)` is `group[n * C + c]` and
/// both moments are batch estimates over the group.
///
/// `dz` is the upstream gradient with respect to `z`. Groups marked `None`
/// in `group` are skipped (their `dx` is left at zero).
pub(crate) fn standardize_backward(
    z: &Tensor,
    dz: &Tensor,
    group: &[Option<usize>],
    inv_std: &[f64],
) -> Tensor {
    let (n, c, l) = z.dims3().expect("[N, C, L]");
    let groups = inv_std.len();
    let mut count = vec![0usize; groups];
    let mut sum_dz = vec![0.0; groups];
    let mut sum_dz_z = vec![0.0; groups];
    for s in 0..n {
        for ch in 0..c {
            let Some(g) = group[s * c + ch] else { continue };
            let base = (s * c + ch) * l;
            for p in base..base + l {
                count[g] += 1;
                sum_dz[g] += dz.data()[p];
                sum_dz_z[g] += dz.data()[p] * z.data()[p];
            }
        }
    }
    let mut dx = Tensor::zeros(z.shape());
    for s in 0..n {
        for ch in 0..c {
            let Some(g) = group[s * c + ch] else { continue };
            let m = count[g] as f64;
            let base = (s * c + ch) * l;
            for p in base..base + l {
                dx.data_mut()[p] = inv_std[g] / m
                    * (m * dz.data()[p] - sum_dz[g] - z.data()[p] * sum_dz_z[g]);
            }
        }
    }
    dx
}
