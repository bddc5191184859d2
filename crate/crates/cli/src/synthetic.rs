//! Spherical Gaussian mixture with known components, so the ground-truth
//! contexts are available for CN and CN-X.

use ctxnorm::{Rng, Tensor};
use ctxnorm_train::Dataset;

use crate::error::{CliError, Result};

/// `n` samples of dimension `dim` from `k_true` unit-variance Gaussians.
/// Component `k` has mean `(separation/√2)·e_k`, so any two means are
/// exactly `separation` apart. Components get equal shares (`i mod k_true`,
/// shuffled). Labels and returned contexts are both the component ids.
pub fn gen_synthetic_gmm(
    k_true: usize,
    n: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<(Dataset, Vec<usize>)> {
    if k_true == 0 {
        return Err(CliError::Config("k_true must be at least 1".into()));
    }
    if dim < k_true {
        return Err(CliError::Config(format!("dim {dim} cannot hold {k_true} axis-aligned means")));
    }
    if n < k_true {
        return Err(CliError::Config(format!("{n} samples cannot cover {k_true} components")));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(CliError::Config(format!("separation {separation} must be finite and non-negative")));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut comps: Vec<usize> = (0..n).map(|i| i % k_true).collect();
    rng.shuffle(&mut comps);
    let mut x = Vec::with_capacity(n * dim);
    for &c in &comps {
        for d in 0..dim {
            let mean = if d == c { offset } else { 0.0 };
            x.push(rng.normal(mean, 1.0));
        }
    }
    let data = Dataset::from_features(Tensor::from_vec(&[n, dim], x)?, comps.clone(), k_true)?;
    Ok((data, comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = gen_synthetic_gmm(3, 50, 4, 5.0, &mut Rng::new(9)).unwrap();
        let b = gen_synthetic_gmm(3, 50, 4, 5.0, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_gmm(3, 50, 4, 5.0, &mut Rng::new(10)).unwrap();
        assert_ne!(a.0.inputs, c.0.inputs);
    }

    #[test]
    fn components_are_balanced_and_labelled() {
        let (data, ctx) = gen_synthetic_gmm(3, 31, 5, 2.0, &mut Rng::new(1)).unwrap();
        assert_eq!(data.labels, ctx);
        assert_eq!(data.inputs.shape(), &[31, 5, 1]);
        let counts: Vec<usize> = (0..3).map(|k| ctx.iter().filter(|&&c| c == k).count()).collect();
        assert_eq!(counts, vec![11, 10, 10]);
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(gen_synthetic_gmm(0, 10, 2, 1.0, &mut Rng::new(0)).is_err());
        assert!(gen_synthetic_gmm(3, 10, 2, 1.0, &mut Rng::new(0)).is_err());
        assert!(gen_synthetic_gmm(2, 10, 2, f64::NAN, &mut Rng::new(0)).is_err());
    }
}
