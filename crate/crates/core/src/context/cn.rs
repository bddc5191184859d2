use serde::{Deserialize, Serialize};

use super::{check_ids, check_lambdas};
use crate::error::{Error, Result};
use crate::norm::{check_params, check_same_shape, ema, standardize_backward, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::tensor::{masked_moments, Tensor};

/// Context normalization state.
///
/// Within a training batch, each context present is standardized per channel
/// with its own batch moments, scaled by `1/sqrt(λ_k)` and mapped through the
/// context's `(γ_k, β_k)`. With a single context this is batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNorm {
    /// `[K, C]`
    pub gamma: Tensor,
    /// `[K, C]`
    pub beta: Tensor,
    /// Dataset proportions, fixed before training.
    pub lambdas: Vec<f64>,
    /// `[K, C]`
    pub running_mean: Tensor,
    /// `[K, C]`
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    /// Whether each context's running statistics have been updated.
    pub updated: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CnCache {
    /// Output of the normalization, `1/sqrt(λ) · z`.
    pub xhat: Tensor,
    /// Standardized activations before the `1/sqrt(λ)` factor.
    pub z: Tensor,
    ids: Vec<usize>,
    /// Batch moments per context `[K, C]`; rows of absent or degenerate
    /// contexts are zero.
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    /// Context appears in the batch.
    pub present: Vec<bool>,
    /// Context appears with at most one activation per channel and was
    /// normalized with its running statistics instead.
    pub degenerate: Vec<bool>,
    inv_std: Vec<f64>,
    gamma: Tensor,
    lambdas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl ContextNorm {
    pub fn new(channels: usize, lambdas: Vec<f64>) -> Result<Self> {
        check_lambdas(&lambdas)?;
        let k = lambdas.len();
        Ok(Self {
            gamma: Tensor::ones(&[k, channels]),
            beta: Tensor::zeros(&[k, channels]),
            lambdas,
            running_mean: Tensor::zeros(&[k, channels]),
            running_var: Tensor::ones(&[k, channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            updated: vec![false; k],
        })
    }

    pub fn contexts(&self) -> usize {
        self.lambdas.len()
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[1]
    }

    fn check(&self, x: &Tensor, ids: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let (n, c, l) = x.dims3()?;
        let k = self.contexts();
        if self.gamma.shape() != [k, c] || self.beta.shape() != [k, c] {
            return Err(Error::Shape(format!(
                "context norm with {k} contexts got gamma {:?} for {c} channels",
                self.gamma.shape()
            )));
        }
        check_lambdas(&self.lambdas)?;
        check_params(self.momentum, self.eps)?;
        check_ids(ids, n, k)?;
        Ok((n, c, l, k))
    }

    fn apply(&self, x: &Tensor, ids: &[usize], mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor, Tensor) {
        let (n, c, l) = x.dims3().expect("checked");
        let mut z = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            let k = ids[s];
            let scale = 1.0 / self.lambdas[k].sqrt();
            for ch in 0..c {
                let kc = k * c + ch;
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let zv = (x.data()[p] - mean[kc]) * inv_std[kc];
                    let h = scale * zv;
                    z.data_mut()[p] = zv;
                    xhat.data_mut()[p] = h;
                    y.data_mut()[p] = self.gamma.data()[kc] * h + self.beta.data()[kc];
                }
            }
        }
        (z, xhat, y)
    }

    /// Training-mode forward. Running statistics are left untouched; pass the
    /// cache to [`ContextNorm::update_running`].
    pub fn forward_train(&self, x: &Tensor, ids: &[usize]) -> Result<(Tensor, CnCache)> {
        let (n, c, l, k) = self.check(x, ids)?;
        let mut present = vec![false; k];
        let mut degenerate = vec![false; k];
        let mut batch_mean = Tensor::zeros(&[k, c]);
        let mut batch_var = Tensor::zeros(&[k, c]);
        let mut mean = vec![0.0; k * c];
        let mut var = vec![1.0; k * c];
        for ctx in 0..k {
            let mask: Vec<bool> = ids.iter().map(|&id| id == ctx).collect();
            let members = mask.iter().filter(|&&m| m).count();
            if members == 0 {
                continue;
            }
            present[ctx] = true;
            let (m, v) = if members * l <= 1 {
                degenerate[ctx] = true;
                (self.running_mean.row(ctx).to_vec(), self.running_var.row(ctx).to_vec())
            } else {
                let moments = masked_moments(x, &mask)?;
                batch_mean.row_mut(ctx).copy_from_slice(&moments.mean);
                batch_var.row_mut(ctx).copy_from_slice(&moments.var);
                (moments.mean, moments.var)
            };
            mean[ctx * c..(ctx + 1) * c].copy_from_slice(&m);
            var[ctx * c..(ctx + 1) * c].copy_from_slice(&v);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (z, xhat, y) = self.apply(x, ids, &mean, &inv_std);
        y.ensure_finite("context norm output")?;
        debug_assert_eq!(n, ids.len());
        let cache = CnCache {
            xhat,
            z,
            ids: ids.to_vec(),
            batch_mean,
            batch_var,
            present,
            degenerate,
            inv_std,
            gamma: self.gamma.clone(),
            lambdas: self.lambdas.clone(),
        };
        Ok((y, cache))
    }

    /// Moving-average update for every context that had usable batch
    /// statistics, in context order.
    pub fn update_running(&mut self, cache: &CnCache) -> Result<()> {
        check_same_shape(&self.running_mean, &cache.batch_mean, "context norm running mean")?;
        let c = self.channels();
        for ctx in 0..self.contexts() {
            if cache.present[ctx] && !cache.degenerate[ctx] {
                let range = ctx * c..(ctx + 1) * c;
                ema(&mut self.running_mean.data_mut()[range.clone()], cache.batch_mean.row(ctx), self.momentum);
                ema(&mut self.running_var.data_mut()[range], cache.batch_var.row(ctx), self.momentum);
                self.updated[ctx] = true;
            }
        }
        Ok(())
    }

    /// Inference with the running statistics of each sample's context.
    pub fn forward_eval(&self, x: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.check(x, ids)?;
        if let Some(&ctx) = ids.iter().find(|&&id| !self.updated[id]) {
            return Err(Error::Uninitialized(format!("context {ctx} has no running statistics")));
        }
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (_, _, y) = self.apply(x, ids, self.running_mean.data(), &inv_std);
        y.ensure_finite("context norm output")?;
        Ok(y)
    }
}

pub fn cn_backward(cache: &CnCache, dy: &Tensor) -> Result<CnGrads> {
    check_same_shape(&cache.xhat, dy, "cn_backward dy")?;
    let (n, c, l) = dy.dims3()?;
    let k = cache.lambdas.len();
    let mut dgamma = Tensor::zeros(&[k, c]);
    let mut dbeta = Tensor::zeros(&[k, c]);
    let mut dz = Tensor::zeros(dy.shape());
    for s in 0..n {
        let ctx = cache.ids[s];
        let scale = 1.0 / cache.lambdas[ctx].sqrt();
        for ch in 0..c {
            let kc = ctx * c + ch;
            let base = (s * c + ch) * l;
            for p in base..base + l {
                let g = dy.data()[p];
                dgamma.data_mut()[kc] += g * cache.xhat.data()[p];
                dbeta.data_mut()[kc] += g;
                dz.data_mut()[p] = g * cache.gamma.data()[kc] * scale;
            }
        }
    }
    let group: Vec<Option<usize>> = (0..n * c)
        .map(|i| {
            let ctx = cache.ids[i / c];
            (!cache.degenerate[ctx]).then_some(ctx * c + i % c)
        })
        .collect();
    let mut dx = standardize_backward(&cache.z, &dz, &group, &cache.inv_std);
    // Degenerate contexts used constant statistics.
    for s in (0..n).filter(|&s| cache.degenerate[cache.ids[s]]) {
        let ctx = cache.ids[s];
        for ch in 0..c {
            let base = (s * c + ch) * l;
            for p in base..base + l {
                dx.data_mut()[p] = dz.data()[p] * cache.inv_std[ctx * c + ch];
            }
        }
    }
    Ok(CnGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, probe_loss};
    use crate::norm::{bn_backward, BatchNorm};
    use crate::rng::Rng;
    use crate::tensor::Fill;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::create(shape, Fill::Normal { mean: 0.0, std: 1.0 }, Some(rng)).unwrap()
    }

    #[test]
    fn single_context_is_batch_norm() {
        let mut rng = Rng::new(1);
        let x = random(&[4, 3, 2], &mut rng);
        let dy = random(&[4, 3, 2], &mut rng);
        let mut cn = ContextNorm::new(3, vec![1.0]).unwrap();
        cn.gamma = random(&[1, 3], &mut rng);
        cn.beta = random(&[1, 3], &mut rng);
        let bn = BatchNorm {
            gamma: cn.gamma.clone().reshape(&[3]).unwrap(),
            beta: cn.beta.clone().reshape(&[3]).unwrap(),
            ..BatchNorm::new(3)
        };
        let (y_cn, c_cn) = cn.forward_train(&x, &[0; 4]).unwrap();
        let (y_bn, c_bn) = bn.forward_train(&x).unwrap();
        assert!(y_cn.max_abs_diff(&y_bn) < 1e-10);
        let g_cn = cn_backward(&c_cn, &dy).unwrap();
        let g_bn = bn_backward(&c_bn, &dy).unwrap();
        assert!(g_cn.dx.max_abs_diff(&g_bn.dx) < 1e-10);
        assert!(g_cn.dgamma.data().iter().zip(g_bn.dgamma.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn lambda_scales_two_point_context() {
        let mut cn = ContextNorm::new(1, vec![0.25, 0.75]).unwrap();
        cn.eps = 0.0;
        let x = Tensor::from_vec(&[4, 1, 1], vec![1.0, 5.0, 3.0, 9.0]).unwrap();
        let (_, cache) = cn.forward_train(&x, &[0, 1, 0, 1]).unwrap();
        assert_eq!(cache.xhat.data()[0], -2.0);
        assert_eq!(cache.xhat.data()[2], 2.0);
    }

    #[test]
    fn decomposes_by_context() {
        let mut rng = Rng::new(5);
        let x = random(&[6, 2, 3], &mut rng);
        let ids = [0, 1, 1, 0, 1, 0];
        let mut cn = ContextNorm::new(2, vec![0.4, 0.6]).unwrap();
        cn.gamma = random(&[2, 2], &mut rng);
        cn.beta = random(&[2, 2], &mut rng);
        let (y, _) = cn.forward_train(&x, &ids).unwrap();
        for ctx in 0..2 {
            let members: Vec<usize> = (0..6).filter(|&s| ids[s] == ctx).collect();
            let sub = x.select_rows(&members).unwrap();
            let (y_sub, _) = cn.forward_train(&sub, &vec![ctx; members.len()]).unwrap();
            for (j, &s) in members.iter().enumerate() {
                let a = &y.data()[s * 6..(s + 1) * 6];
                let b = &y_sub.data()[j * 6..(j + 1) * 6];
                assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn absent_context_keeps_running_stats() {
        let mut rng = Rng::new(2);
        let x = random(&[3, 2, 2], &mut rng);
        let mut cn = ContextNorm::new(2, vec![0.5, 0.5]).unwrap();
        let (_, cache) = cn.forward_train(&x, &[1, 1, 1]).unwrap();
        cn.update_running(&cache).unwrap();
        assert_eq!(cn.running_mean.row(0), &[0.0, 0.0]);
        assert_eq!(cn.running_var.row(0), &[1.0, 1.0]);
        assert_eq!(cn.updated, vec![false, true]);
        assert!(matches!(cn.forward_eval(&x, &[0, 1, 1]), Err(Error::Uninitialized(_))));
        assert!(cn.forward_eval(&x, &[1, 1, 1]).is_ok());
    }

    #[test]
    fn single_sample_context_falls_back() {
        let mut rng = Rng::new(4);
        let x = random(&[3, 2, 1], &mut rng);
        let w = random(&[3, 2, 1], &mut rng);
        let mut cn = ContextNorm::new(2, vec![0.5, 0.5]).unwrap();
        cn.eps = 1e-3;
        cn.running_mean = random(&[2, 2], &mut rng);
        let ids = [0, 1, 0];
        let (y, cache) = cn.forward_train(&x, &ids).unwrap();
        assert_eq!(cache.degenerate, vec![false, true]);
        let h = (x.data()[2] - cn.running_mean.data()[2]) / (1.0 + cn.eps).sqrt() / 0.5f64.sqrt();
        assert!((y.data()[2] - h).abs() < 1e-12);

        let before = cn.running_mean.clone();
        cn.update_running(&cache).unwrap();
        assert_eq!(cn.running_mean.row(1), before.row(1));

        let g = cn_backward(&cache, &w).unwrap();
        let num = finite_diff_grad(|t| Ok(probe_loss(&cn.forward_train(t, &ids)?.0, &w)), &x, 1e-5).unwrap();
        assert!(max_rel_error(&g.dx, &num, 1e-8) < 1e-5);
    }

    #[test]
    fn eval_mode_arithmetic() {
        let mut cn = ContextNorm::new(1, vec![1.0]).unwrap();
        cn.eps = 0.0;
        cn.updated = vec![true];
        let x = Tensor::from_vec(&[3, 1, 1], vec![-2.0, 0.1, 7.0]).unwrap();
        assert_eq!(cn.forward_eval(&x, &[0; 3]).unwrap(), x);

        let mut quarter = ContextNorm::new(1, vec![0.25, 0.75]).unwrap();
        quarter.gamma = Tensor::ones(&[2, 1]);
        quarter.eps = 0.0;
        quarter.updated = vec![true, true];
        let y = quarter.forward_eval(&x, &[0; 3]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }

        let mut centered = ContextNorm::new(1, vec![0.5, 0.5]).unwrap();
        centered.running_mean = Tensor::from_vec(&[2, 1], vec![3.0, -1.0]).unwrap();
        centered.beta = Tensor::from_vec(&[2, 1], vec![0.7, 0.2]).unwrap();
        centered.updated = vec![true, true];
        let x = Tensor::from_vec(&[2, 1, 1], vec![3.0, -1.0]).unwrap();
        assert_eq!(centered.forward_eval(&x, &[0, 1]).unwrap().data(), &[0.7, 0.2]);
    }

    #[test]
    fn rejects_bad_lambdas_and_ids() {
        assert!(ContextNorm::new(2, vec![0.5, 0.6]).is_err());
        assert!(ContextNorm::new(2, vec![1.0, 0.0]).is_err());
        let cn = ContextNorm::new(1, vec![0.5, 0.5]).unwrap();
        assert!(cn.forward_train(&Tensor::ones(&[2, 1, 2]), &[0, 2]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let x = random(&[4, 3, 2], &mut rng);
        let w = random(&[4, 3, 2], &mut rng);
        let ids = [0, 1, 1, 0];
        let mut cn = ContextNorm::new(3, vec![0.3, 0.7]).unwrap();
        cn.eps = 1e-3;
        cn.gamma = random(&[2, 3], &mut rng);
        cn.beta = random(&[2, 3], &mut rng);
        let (_, cache) = cn.forward_train(&x, &ids).unwrap();
        let g = cn_backward(&cache, &w).unwrap();
        let num = finite_diff_grad(|t| Ok(probe_loss(&cn.forward_train(t, &ids)?.0, &w)), &x, 1e-5).unwrap();
        assert!(max_rel_error(&g.dx, &num, 1e-8) < 1e-5);
        let num = finite_diff_grad(
            |t| Ok(probe_loss(&ContextNorm { gamma: t.clone(), ..cn.clone() }.forward_train(&x, &ids)?.0, &w)),
            &cn.gamma,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&g.dgamma, &num, 1e-8) < 1e-5);
    }
}
