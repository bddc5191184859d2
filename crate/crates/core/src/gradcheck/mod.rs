//! Central-difference gradient oracle and the per-layer check suite built on
//! it.

mod suite;

pub use suite::{run_suite, LayerCheck, SuiteConfig, LAYERS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("oracle evaluation at element {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from dominating the
/// ratio; they are then judged on absolute error.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Weighted sum `Σ w_i y_i`, the scalar loss used by every layer check: its
/// gradient with respect to `y` is exactly `w`.
pub fn probe_loss(y: &Tensor, weights: &Tensor) -> f64 {
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_and_linear() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.0, 8.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::ones(&[1]);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
