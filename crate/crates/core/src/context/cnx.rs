use serde::{Deserialize, Serialize};

use super::{check_ids, check_lambdas};
use crate::error::{Error, Result};
use crate::norm::{check_same_shape, DEFAULT_EPS};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};

/// Context normalization with trainable statistics.
///
/// The mean `μ_k` and variance `exp(log_var_k)` of every context are learned
/// by gradient descent instead of estimated from the batch, so training and
/// inference use the same transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnxParams {
    /// `[K, C]`
    pub gamma: Tensor,
    /// `[K, C]`
    pub beta: Tensor,
    /// `[K, C]`
    pub mu: Tensor,
    /// `[K, C]`, log of the context variance.
    pub log_var: Tensor,
    pub lambdas: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct CnxCache {
    /// Normalized activations before the affine map.
    pub xhat: Tensor,
    ids: Vec<usize>,
    params: CnxParams,
}

#[derive(Debug, Clone)]
pub struct CnxGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
    pub dmu: Tensor,
    pub dlog_var: Tensor,
}

impl CnxParams {
    /// `μ ~ N(0, 0.5)`, unit variance, identity affine map.
    pub fn new(channels: usize, lambdas: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        check_lambdas(&lambdas)?;
        let k = lambdas.len();
        Ok(Self {
            gamma: Tensor::ones(&[k, channels]),
            beta: Tensor::zeros(&[k, channels]),
            mu: Tensor::create(&[k, channels], Fill::Normal { mean: 0.0, std: 0.5 }, Some(rng))?,
            log_var: Tensor::zeros(&[k, channels]),
            lambdas,
            eps: DEFAULT_EPS,
        })
    }

    pub fn contexts(&self) -> usize {
        self.lambdas.len()
    }

    fn check(&self, x: &Tensor, ids: &[usize]) -> Result<()> {
        let (n, c, _) = x.dims3()?;
        let k = self.contexts();
        for (t, what) in [(&self.gamma, "gamma"), (&self.beta, "beta"), (&self.mu, "mu"), (&self.log_var, "log_var")] {
            if t.shape() != [k, c] {
                return Err(Error::Shape(format!("CN-X {what} is {:?}, expected [{k}, {c}]", t.shape())));
            }
        }
        check_lambdas(&self.lambdas)?;
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be non-negative", self.eps)));
        }
        check_ids(ids, n, k)
    }
}

pub fn cnx_forward(x: &Tensor, ids: &[usize], params: &CnxParams) -> Result<(Tensor, CnxCache)> {
    params.check(x, ids)?;
    let (n, c, l) = x.dims3()?;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        let k = ids[s];
        for ch in 0..c {
            let kc = k * c + ch;
            let denom = (params.lambdas[k] * (params.log_var.data()[kc].exp() + params.eps)).sqrt();
            let base = (s * c + ch) * l;
            for p in base..base + l {
                let h = (x.data()[p] - params.mu.data()[kc]) / denom;
                xhat.data_mut()[p] = h;
                y.data_mut()[p] = params.gamma.data()[kc] * h + params.beta.data()[kc];
            }
        }
    }
    y.ensure_finite("CN-X output")?;
    Ok((y, CnxCache { xhat, ids: ids.to_vec(), params: params.clone() }))
}

pub fn cnx_backward(cache: &CnxCache, dy: &Tensor) -> Result<CnxGrads> {
    check_same_shape(&cache.xhat, dy, "cnx_backward dy")?;
    let (n, c, l) = dy.dims3()?;
    let p = &cache.params;
    let shape = p.gamma.shape().to_vec();
    let mut dgamma = Tensor::zeros(&shape);
    let mut dbeta = Tensor::zeros(&shape);
    let mut dmu = Tensor::zeros(&shape);
    let mut dvar = Tensor::zeros(&shape);
    let mut dx = Tensor::zeros(dy.shape());
    for s in 0..n {
        let k = cache.ids[s];
        for ch in 0..c {
            let kc = k * c + ch;
            let var_eps = p.log_var.data()[kc].exp() + p.eps;
            let slope = 1.0 / (p.lambdas[k] * var_eps).sqrt();
            let base = (s * c + ch) * l;
            for i in base..base + l {
                let g = dy.data()[i];
                let h = cache.xhat.data()[i];
                let dh = g * p.gamma.data()[kc];
                dgamma.data_mut()[kc] += g * h;
                dbeta.data_mut()[kc] += g;
                dx.data_mut()[i] = dh * slope;
                dmu.data_mut()[kc] -= dh * slope;
                dvar.data_mut()[kc] -= 0.5 * dh * h / var_eps;
            }
        }
    }
    let dlog_var = Tensor::from_vec(
        &shape,
        dvar.data().iter().zip(p.log_var.data()).map(|(d, lv)| d * lv.exp()).collect(),
    )?;
    Ok(CnxGrads { dx, dgamma, dbeta, dmu, dlog_var })
}
