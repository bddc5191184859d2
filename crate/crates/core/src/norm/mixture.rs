use serde::{Deserialize, Serialize};

use super::{check_len, check_params, check_same_shape, ema, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, em_refine, posteriors, weighted_moments_or, GmmParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mixture normalization with a mixture fitted by EM outside the loss.
///
/// Every spatial position `(n, l)` is a `C`-dimensional observation. Its
/// posteriors under the mixture weight the per-component standardizations:
/// `x̂ = Σ_k p(k|x) / sqrt(λ_k) · (x − μ_k) / sqrt(σ²_k + ε)`, with `μ_k`,
/// `σ²_k` the posterior-weighted moments of the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub components: usize,
    /// `None` until the first EM fit.
    pub gmm: Option<GmmParams>,
    /// `[K, C]`
    pub running_mean: Tensor,
    /// `[K, C]`
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub updates: u64,
    /// Re-run EM every this many training steps.
    pub refresh_every: u64,
    /// Warm-started EM iterations per refresh.
    pub refresh_iters: usize,
    pub fit_max_iters: usize,
    pub fit_tol: f64,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct MixNormCache {
    pub xhat: Tensor,
    /// `[N·L, K]`
    pub posteriors: Tensor,
    /// `[K, C]`
    pub mean: Tensor,
    pub var: Tensor,
    /// `Σ_k p(k|x) / (sqrt(λ_k) sqrt(σ²_k + ε))` per activation: the whole
    /// of `∂x̂/∂x` once posteriors and moments are held fixed.
    slope: Tensor,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MixNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Forward pass with externally supplied posteriors `[N·L, K]`, mixture
/// weights and per-component moments `[K, C]`.
#[allow(clippy::too_many_arguments)]
pub fn mixnorm_forward_frozen(
    x: &Tensor,
    post: &Tensor,
    weights: &[f64],
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, MixNormCache)> {
    let (n, c, l) = x.dims3()?;
    let k = weights.len();
    check_len(gamma, c, "gamma")?;
    check_len(beta, c, "beta")?;
    if post.shape() != [n * l, k] || mean.shape() != [k, c] || var.shape() != [k, c] {
        return Err(Error::Shape(format!(
            "mixnorm with K={k}: posteriors {:?}, moments {:?}/{:?}",
            post.shape(),
            mean.shape(),
            var.shape()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0)) {
        return Err(Error::InvalidMixture(format!("weight {i} is {}", weights[i])));
    }
    let inv_sqrt_w: Vec<f64> = weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut slope = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for p in 0..l {
            let r = post.row(s * l + p);
            for ch in 0..c {
                let idx = (s * c + ch) * l + p;
                let v = x.data()[idx];
                let (mut z, mut dz) = (0.0, 0.0);
                for m in 0..k {
                    let coef = r[m] * inv_sqrt_w[m] * inv_std[m * c + ch];
                    z += coef * (v - mean.data()[m * c + ch]);
                    dz += coef;
                }
                xhat.data_mut()[idx] = z;
                slope.data_mut()[idx] = dz;
                y.data_mut()[idx] = gamma.data()[ch] * z + beta.data()[ch];
            }
        }
    }
    y.ensure_finite("mixture norm output")?;
    let cache = MixNormCache {
        xhat,
        posteriors: post.clone(),
        mean: mean.clone(),
        var: var.clone(),
        slope,
        gamma: gamma.data().to_vec(),
    };
    Ok((y, cache))
}

/// Training-mode forward: posteriors from `gmm`, moments from the batch.
pub fn mixnorm_forward(
    x: &Tensor,
    gmm: &GmmParams,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, MixNormCache)> {
    gmm.validate()?;
    let positions = x.positions()?;
    let post = posteriors(&positions, gmm)?;
    let (mean, var) = weighted_moments_or(&positions, &post, &gmm.means, &gmm.vars)?;
    mixnorm_forward_frozen(x, &post, gmm.weights.data(), &mean, &var, gamma, beta, eps)
}

/// Backward pass with posteriors, weights and moments treated as constants.
pub fn mixnorm_backward(cache: &MixNormCache, dy: &Tensor) -> Result<MixNormGrads> {
    check_same_shape(&cache.xhat, dy, "mixnorm_backward dy")?;
    let (n, c, l) = dy.dims3()?;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * l;
            for p in base..base + l {
                let g = dy.data()[p];
                dgamma.data_mut()[ch] += g * cache.xhat.data()[p];
                dbeta.data_mut()[ch] += g;
                dx.data_mut()[p] = g * cache.gamma[ch] * cache.slope.data()[p];
            }
        }
    }
    Ok(MixNormGrads { dx, dgamma, dbeta })
}

impl MixNorm {
    pub fn new(channels: usize, components: usize, seed: u64) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("mixture norm needs K ≥ 1".into()));
        }
        Ok(Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            components,
            gmm: None,
            running_mean: Tensor::zeros(&[components, channels]),
            running_var: Tensor::ones(&[components, channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            updates: 0,
            refresh_every: 50,
            refresh_iters: 5,
            fit_max_iters: 100,
            fit_tol: 1e-6,
            seed,
            steps: 0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0 && self.gmm.is_some()
    }

    /// Fits the mixture on the first call and re-fits it (warm start) every
    /// `refresh_every` calls after that. Call once per training step, before
    /// [`MixNorm::forward_train`].
    pub fn refresh_mixture(&mut self, x: &Tensor) -> Result<()> {
        let positions = x.positions()?;
        match &self.gmm {
            None => {
                let mut rng = Rng::with_stream(self.seed, self.steps);
                self.gmm = Some(em_fit(&positions, self.components, &mut rng, self.fit_max_iters, self.fit_tol)?);
            }
            Some(gmm) if self.refresh_every > 0 && self.steps.is_multiple_of(self.refresh_every) => {
                self.gmm = Some(em_refine(&positions, gmm, self.refresh_iters, self.fit_tol)?);
            }
            Some(_) => {}
        }
        self.steps += 1;
        Ok(())
    }

    /// The fitted mixture, or a fresh fit on `x` when none exists yet (used
    /// for statistics-only passes that must not mutate the layer).
    pub fn mixture_for(&self, x: &Tensor) -> Result<GmmParams> {
        match &self.gmm {
            Some(g) => Ok(g.clone()),
            None => {
                let mut rng = Rng::with_stream(self.seed, 0);
                em_fit(&x.positions()?, self.components, &mut rng, self.fit_max_iters, self.fit_tol)
            }
        }
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, MixNormCache)> {
        check_params(self.momentum, self.eps)?;
        let gmm = self.gmm.as_ref().ok_or_else(|| Error::Uninitialized("mixture never fitted".into()))?;
        mixnorm_forward(x, gmm, &self.gamma, &self.beta, self.eps)
    }

    pub fn update_running(&mut self, cache: &MixNormCache) -> Result<()> {
        check_same_shape(&self.running_mean, &cache.mean, "mixture norm running mean")?;
        ema(self.running_mean.data_mut(), cache.mean.data(), self.momentum);
        ema(self.running_var.data_mut(), cache.var.data(), self.momentum);
        self.updates += 1;
        Ok(())
    }

    /// Inference: posteriors from the fitted mixture, running moments.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized("mixture norm never trained".into()));
        }
        let gmm = self.gmm.as_ref().expect("checked");
        let post = posteriors(&x.positions()?, gmm)?;
        let (y, _) = mixnorm_forward_frozen(
            x,
            &post,
            gmm.weights.data(),
            &self.running_mean,
            &self.running_var,
            &self.gamma,
            &self.beta,
            self.eps,
        )?;
        Ok(y)
    }
}
