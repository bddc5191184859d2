use serde::{Deserialize, Serialize};

use super::{check_len, check_same_shape, standardize_backward, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer normalization: per-sample statistics over every `(c, l)`, with a
/// per-channel affine transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self { gamma: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]), eps: DEFAULT_EPS }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LnCache)> {
        ln_forward(x, &self.gamma, &self.beta, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

pub fn ln_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LnCache)> {
    let (n, c, l) = x.dims3()?;
    check_len(gamma, c, "gamma")?;
    check_len(beta, c, "beta")?;
    if c * l < 2 {
        return Err(Error::DegenerateBatch(format!(
            "layer norm needs at least 2 features per sample, got C·L = {}",
            c * l
        )));
    }
    let width = c * l;
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut inv_std = vec![0.0; n];
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        let row = &x.data()[s * width..(s + 1) * width];
        let mu = row.iter().sum::<f64>() / width as f64;
        let v = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / width as f64;
        let inv = 1.0 / (v + eps).sqrt();
        mean[s] = mu;
        var[s] = v;
        inv_std[s] = inv;
        for ch in 0..c {
            for p in 0..l {
                let idx = s * width + ch * l + p;
                let z = (x.data()[idx] - mu) * inv;
                xhat.data_mut()[idx] = z;
                y.data_mut()[idx] = gamma.data()[ch] * z + beta.data()[ch];
            }
        }
    }
    y.ensure_finite("layer norm output")?;
    Ok((y, LnCache { xhat, mean, var, inv_std, gamma: gamma.data().to_vec() }))
}

pub fn ln_backward(cache: &LnCache, dy: &Tensor) -> Result<LnGrads> {
    check_same_shape(&cache.xhat, dy, "ln_backward dy")?;
    let (n, c, l) = dy.dims3()?;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dz = Tensor::zeros(dy.shape());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * l;
            for p in base..base + l {
                let g = dy.data()[p];
                dgamma.data_mut()[ch] += g * cache.xhat.data()[p];
                dbeta.data_mut()[ch] += g;
                dz.data_mut()[p] = g * cache.gamma[ch];
            }
        }
    }
    let group: Vec<Option<usize>> = (0..n * c).map(|i| Some(i / c)).collect();
    let dx = standardize_backward(&cache.xhat, &dz, &group, &cache.inv_std);
    Ok(LnGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, probe_loss};
    use crate::rng::Rng;
    use crate::tensor::Fill;

    #[test]
    fn constant_samples_give_beta() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![3.0, 3.0, -1.0, -1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let (y, cache) = ln_forward(&x, &Tensor::ones(&[2]), &beta, 1e-5).unwrap();
        assert!(cache.xhat.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.data(), &[0.1, 0.2, 0.1, 0.2]);
    }

    #[test]
    fn two_values() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![0.0, 2.0]).unwrap();
        let (y, _) = ln_forward(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn degenerate_sample() {
        let x = Tensor::ones(&[4, 1, 1]);
        assert!(matches!(
            ln_forward(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let normal = Fill::Normal { mean: 0.0, std: 1.0 };
        let x = Tensor::create(&[2, 3, 2], normal, Some(&mut rng)).unwrap();
        let w = Tensor::create(&[2, 3, 2], normal, Some(&mut rng)).unwrap();
        let gamma = Tensor::create(&[3], normal, Some(&mut rng)).unwrap();
        let beta = Tensor::create(&[3], normal, Some(&mut rng)).unwrap();
        let (_, cache) = ln_forward(&x, &gamma, &beta, 1e-3).unwrap();
        let g = ln_backward(&cache, &w).unwrap();
        let num = finite_diff_grad(|t| Ok(probe_loss(&ln_forward(t, &gamma, &beta, 1e-3)?.0, &w)), &x, 1e-5)
            .unwrap();
        assert!(max_rel_error(&g.dx, &num, 1e-8) < 1e-6);
        let num = finite_diff_grad(|t| Ok(probe_loss(&ln_forward(&x, t, &beta, 1e-3)?.0, &w)), &gamma, 1e-5)
            .unwrap();
        assert!(max_rel_error(&g.dgamma, &num, 1e-8) < 1e-6);
    }
}
