use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{normalize_scores, DiagLogPdf};
use crate::norm::{check_same_shape, DEFAULT_EPS};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};

/// Adaptive context normalization parameters.
///
/// A diagonal Gaussian mixture `(softmax(logit_lambda), means, exp(log_var))`
/// both assigns each position's channel vector to soft contexts and supplies
/// the statistics each context normalizes with. Everything is trained by
/// backpropagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcnParams {
    /// `[K, C]`
    pub gamma: Tensor,
    /// `[K, C]`
    pub beta: Tensor,
    /// `[K]`
    pub logit_lambda: Tensor,
    /// `[K, C]`
    pub means: Tensor,
    /// `[K, C]`
    pub log_var: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct AcnCache {
    /// Input as per-position vectors `[N*L, C]`.
    x: Tensor,
    n: usize,
    l: usize,
    /// `p(k | x)` per position, `[N*L, K]`.
    pub posteriors: Tensor,
    params: AcnParams,
}

#[derive(Debug, Clone)]
pub struct AcnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
    pub dlogit_lambda: Tensor,
    pub dmeans: Tensor,
    pub dlog_var: Tensor,
}

/// Uniform mixture weights, `means ~ N(0, 0.5)`, unit variances and an
/// identity affine map.
pub fn acn_init(k: usize, channels: usize, rng: &mut Rng) -> Result<AcnParams> {
    if k == 0 {
        return Err(Error::Config("ACN needs at least one context".into()));
    }
    Ok(AcnParams {
        gamma: Tensor::ones(&[k, channels]),
        beta: Tensor::zeros(&[k, channels]),
        logit_lambda: Tensor::zeros(&[k]),
        means: Tensor::create(&[k, channels], Fill::Normal { mean: 0.0, std: 0.5 }, Some(rng))?,
        log_var: Tensor::zeros(&[k, channels]),
        eps: DEFAULT_EPS,
    })
}

impl AcnParams {
    pub fn contexts(&self) -> usize {
        self.logit_lambda.len()
    }

    /// `softmax(logit_lambda)`. The last weight is stored as one minus the
    /// others, which makes their in-order floating-point sum exactly 1.
    pub fn lambdas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.contexts()];
        normalize_scores(self.logit_lambda.data(), &mut out);
        if let Some((last, rest)) = out.split_last_mut() {
            let residual = 1.0 - rest.iter().sum::<f64>();
            if residual > 0.0 {
                *last = residual;
            }
        }
        out
    }

    fn check(&self, c: usize) -> Result<()> {
        let k = self.contexts();
        if k == 0 || self.logit_lambda.shape() != [k] {
            return Err(Error::Shape(format!("ACN logit_lambda has shape {:?}", self.logit_lambda.shape())));
        }
        for (t, what) in [(&self.gamma, "gamma"), (&self.beta, "beta"), (&self.means, "means"), (&self.log_var, "log_var")] {
            if t.shape() != [k, c] {
                return Err(Error::Shape(format!("ACN {what} is {:?}, expected [{k}, {c}]", t.shape())));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be non-negative", self.eps)));
        }
        if !self.logit_lambda.is_finite() || !self.means.is_finite() || !self.log_var.is_finite() {
            return Err(Error::NonFinite("ACN mixture parameters".into()));
        }
        Ok(())
    }
}

pub fn acn_forward(x: &Tensor, params: &AcnParams) -> Result<(Tensor, AcnCache)> {
    let (n, c, l) = x.dims3()?;
    params.check(c)?;
    let k = params.contexts();
    let pos = x.positions()?;
    let lambdas = params.lambdas();
    let log_lambda: Vec<f64> = lambdas.iter().map(|v| v.ln()).collect();
    let var = params.log_var.map(f64::exp);
    let pdf = DiagLogPdf::new(&var);
    // 1/sqrt(λ_k(v_kc + ε)) per (context, channel).
    let slope: Vec<f64> = (0..k * c).map(|kc| 1.0 / (lambdas[kc / c] * (var.data()[kc] + params.eps)).sqrt()).collect();
    let (means, gamma, beta) = (params.means.data(), params.gamma.data(), params.beta.data());
    let mut post = Tensor::zeros(&[n * l, k]);
    let mut y = Tensor::zeros(&[n * l, c]);
    let mut score = vec![0.0; k];
    for p in 0..n * l {
        let xp = pos.row(p);
        for (j, s) in score.iter_mut().enumerate() {
            *s = log_lambda[j] + pdf.eval(j, xp, params.means.row(j));
        }
        normalize_scores(&score, post.row_mut(p));
        let yp = y.row_mut(p);
        for j in 0..k {
            let pk = post.row(p)[j];
            for ch in 0..c {
                let kc = j * c + ch;
                let u = (xp[ch] - means[kc]) * slope[kc];
                yp[ch] += pk * (gamma[kc] * u + beta[kc]);
            }
        }
    }
    let y = Tensor::from_positions(&y, n, l)?;
    y.ensure_finite("ACN output")?;
    Ok((y, AcnCache { x: pos, n, l, posteriors: post, params: params.clone() }))
}

pub fn acn_backward(cache: &AcnCache, dy: &Tensor) -> Result<AcnGrads> {
    if dy.shape() != [cache.n, cache.x.shape()[1], cache.l] {
        return Err(Error::Shape(format!("acn_backward dy has shape {:?}", dy.shape())));
    }
    let g_pos = dy.positions()?;
    check_same_shape(&cache.x, &g_pos, "acn_backward dy")?;
    let prm = &cache.params;
    let (rows, c) = cache.x.dims2()?;
    let k = prm.contexts();
    let lambdas = prm.lambdas();
    let var = prm.log_var.map(f64::exp);
    let mut dx = Tensor::zeros(&[rows, c]);
    let mut dgamma = Tensor::zeros(&[k, c]);
    let mut dbeta = Tensor::zeros(&[k, c]);
    let mut dmeans = Tensor::zeros(&[k, c]);
    let mut dlog_var = Tensor::zeros(&[k, c]);
    let mut dlog_lambda = vec![0.0; k];
    let mut u = vec![0.0; k * c];
    let mut e = vec![0.0; k];
    let slope: Vec<f64> = (0..k * c).map(|kc| 1.0 / (lambdas[kc / c] * (var.data()[kc] + prm.eps)).sqrt()).collect();
    let inv_var: Vec<f64> = var.data().iter().map(|v| 1.0 / v).collect();
    let inv_var_eps: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + prm.eps)).collect();
    let (means, gamma, beta) = (prm.means.data(), prm.gamma.data(), prm.beta.data());
    for p in 0..rows {
        let xp = cache.x.row(p);
        let g = g_pos.row(p);
        let post = cache.posteriors.row(p);
        for j in 0..k {
            e[j] = 0.0;
            for ch in 0..c {
                let kc = j * c + ch;
                u[kc] = (xp[ch] - means[kc]) * slope[kc];
                e[j] += g[ch] * (gamma[kc] * u[kc] + beta[kc]);
            }
        }
        let mean_e: f64 = post.iter().zip(&e).map(|(a, b)| a * b).sum();
        let dxp = dx.row_mut(p);
        for j in 0..k {
            // Gradient with respect to the log joint score of component j.
            let ds = post[j] * (e[j] - mean_e);
            let mut du_u = 0.0;
            for ch in 0..c {
                let kc = j * c + ch;
                let v = var.data()[kc];
                let dev = xp[ch] - means[kc];
                let gp = g[ch] * post[j];
                let du = gp * gamma[kc];
                let pull = ds * dev * inv_var[kc];
                dgamma.data_mut()[kc] += gp * u[kc];
                dbeta.data_mut()[kc] += gp;
                dxp[ch] += du * slope[kc] - pull;
                dmeans.data_mut()[kc] += pull - du * slope[kc];
                let dv = du * (-0.5 * u[kc] * inv_var_eps[kc]);
                dlog_var.data_mut()[kc] += dv * v + ds * (-0.5 + 0.5 * dev * dev * inv_var[kc]);
                du_u += du * u[kc];
            }
            dlog_lambda[j] += ds - 0.5 * du_u;
        }
    }
    let total: f64 = dlog_lambda.iter().sum();
    let dlogit_lambda =
        Tensor::from_vec(&[k], (0..k).map(|j| dlog_lambda[j] - lambdas[j] * total).collect())?;
    Ok(AcnGrads {
        dx: Tensor::from_positions(&dx, cache.n, cache.l)?,
        dgamma,
        dbeta,
        dlogit_lambda,
        dmeans,
        dlog_var,
    })
}
