use serde::{Deserialize, Serialize};

use super::{check_len, check_params, check_same_shape, ema, standardize_backward};
use super::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{masked_moments, Tensor};

/// Batch normalization: per-channel statistics over every `(n, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    /// Number of running-statistic updates applied so far.
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Normalizes with the batch's own moments. Running statistics are not
    /// touched; feed `cache.mean` / `cache.var` to [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (n, c, l) = x.dims3()?;
        check_len(&self.gamma, c, "gamma")?;
        check_len(&self.beta, c, "beta")?;
        check_params(self.momentum, self.eps)?;
        if n * l < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 values per channel, got N·L = {}",
                n * l
            )));
        }
        let moments = masked_moments(x, &vec![true; n])?;
        let inv_std: Vec<f64> = moments.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let z = (x.data()[p] - moments.mean[ch]) * inv_std[ch];
                    xhat.data_mut()[p] = z;
                    y.data_mut()[p] = self.gamma.data()[ch] * z + self.beta.data()[ch];
                }
            }
        }
        y.ensure_finite("batch norm output")?;
        let cache = BnCache {
            xhat,
            mean: moments.mean,
            var: moments.var,
            inv_std,
            gamma: self.gamma.data().to_vec(),
        };
        Ok((y, cache))
    }

    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        let c = self.channels();
        if batch_mean.len() != c || batch_var.len() != c {
            return Err(Error::Shape(format!("running update expects {c} channels")));
        }
        ema(self.running_mean.data_mut(), batch_mean, self.momentum);
        ema(self.running_var.data_mut(), batch_var, self.momentum);
        self.updates += 1;
        Ok(())
    }

    /// Inference path using the running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized("batch norm running statistics never updated".into()));
        }
        let (n, c, l) = x.dims3()?;
        check_len(&self.gamma, c, "gamma")?;
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let z = (x.data()[p] - self.running_mean.data()[ch]) * inv;
                    y.data_mut()[p] = self.gamma.data()[ch] * z + self.beta.data()[ch];
                }
            }
        }
        y.ensure_finite("batch norm output")?;
        Ok(y)
    }
}

pub fn bn_backward(cache: &BnCache, dy: &Tensor) -> Result<BnGrads> {
    check_same_shape(&cache.xhat, dy, "bn_backward dy")?;
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
    let group: Vec<Option<usize>> = (0..n * c).map(|i| Some(i % c)).collect();
    let dx = standardize_backward(&cache.xhat, &dz, &group, &cache.inv_std);
    Ok(BnGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, probe_loss};
    use crate::rng::Rng;
    use crate::tensor::Fill;

    fn bn(c: usize, eps: f64) -> BatchNorm {
        BatchNorm { eps, ..BatchNorm::new(c) }
    }

    #[test]
    fn three_values_standardize() {
        let x = Tensor::from_vec(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = bn(1, 0.0).forward_train(&x).unwrap();
        let r = 1.5f64.sqrt();
        for (got, want) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_gives_beta() {
        let mut layer = bn(2, 1e-5);
        layer.gamma = Tensor::zeros(&[2]);
        layer.beta = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        let x = Tensor::create(&[3, 2, 2], Fill::Normal { mean: 0.0, std: 3.0 }, Some(&mut Rng::new(1)))
            .unwrap();
        let (y, _) = layer.forward_train(&x).unwrap();
        for s in 0..3 {
            for ch in 0..2 {
                for p in 0..2 {
                    assert_eq!(y.data()[(s * 2 + ch) * 2 + p], layer.beta.data()[ch]);
                }
            }
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut layer = bn(1, 1e-5);
        layer.beta = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let x = Tensor::full(&[4, 1, 1], 5.0);
        let (y, cache) = layer.forward_train(&x).unwrap();
        assert!(cache.xhat.data().iter().all(|&v| v == 0.0));
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn degenerate_batch() {
        let x = Tensor::ones(&[1, 3, 1]);
        assert!(matches!(bn(3, 1e-5).forward_train(&x), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn running_update_momentum() {
        let mut layer = bn(1, 1e-5);
        layer.momentum = 0.0;
        layer.update_running(&[3.0], &[2.0]).unwrap();
        assert_eq!(layer.running_mean.data(), &[3.0]);
        assert_eq!(layer.running_var.data(), &[2.0]);

        layer.momentum = 1.0;
        layer.update_running(&[100.0], &[100.0]).unwrap();
        assert_eq!(layer.running_mean.data(), &[3.0]);

        let mut layer = bn(1, 1e-5);
        layer.update_running(&[10.0], &[1.0]).unwrap();
        assert!((layer.running_mean.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut layer = bn(1, 0.0);
        assert!(matches!(layer.forward_eval(&Tensor::ones(&[1, 1, 1])), Err(Error::Uninitialized(_))));
        layer.updates = 1;
        let x = Tensor::from_vec(&[3, 1, 1], vec![-1.0, 0.5, 4.0]).unwrap();
        assert_eq!(layer.forward_eval(&x).unwrap(), x);

        layer.running_mean = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        layer.running_var = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        layer.gamma = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        layer.beta = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let y = layer.forward_eval(&Tensor::from_vec(&[1, 1, 1], vec![4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let y = layer.forward_eval(&Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let x = Tensor::create(&[4, 2, 3], Fill::Normal { mean: 0.0, std: 1.0 }, Some(&mut Rng::new(5)))
            .unwrap();
        let (_, cache) = bn(2, 1e-3).forward_train(&x).unwrap();
        let g = bn_backward(&cache, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.dx.data().iter().chain(g.dgamma.data()).chain(g.dbeta.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let normal = Fill::Normal { mean: 0.0, std: 1.0 };
        let x = Tensor::create(&[4, 2, 3], normal, Some(&mut rng)).unwrap();
        let w = Tensor::create(&[4, 2, 3], normal, Some(&mut rng)).unwrap();
        let mut layer = bn(2, 1e-3);
        layer.gamma = Tensor::create(&[2], normal, Some(&mut rng)).unwrap();
        layer.beta = Tensor::create(&[2], normal, Some(&mut rng)).unwrap();
        let (_, cache) = layer.forward_train(&x).unwrap();
        let g = bn_backward(&cache, &w).unwrap();

        let num_dx =
            finite_diff_grad(|t| Ok(probe_loss(&layer.forward_train(t)?.0, &w)), &x, 1e-5).unwrap();
        assert!(max_rel_error(&g.dx, &num_dx, 1e-8) < 1e-6);
        let num_dgamma = finite_diff_grad(
            |t| {
                let probe = BatchNorm { gamma: t.clone(), ..layer.clone() };
                Ok(probe_loss(&probe.forward_train(&x)?.0, &w))
            },
            &layer.gamma,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&g.dgamma, &num_dgamma, 1e-8) < 1e-6);
    }
}
