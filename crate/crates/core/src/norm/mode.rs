use serde::{Deserialize, Serialize};

use super::{check_params, check_same_shape, ema, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};

/// Mode normalization.
///
/// A softmax gate over the per-sample channel means assigns each sample soft
/// membership `g_k(x_n)` in `K` modes. Every mode keeps gate-weighted
/// per-channel moments; a sample is normalized by the gate-weighted sum of
/// its per-mode standardizations, then a shared affine map is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `[K, C]`
    pub gate_weight: Tensor,
    /// `[K]`
    pub gate_bias: Tensor,
    /// `[K, C]`
    pub running_mean: Tensor,
    /// `[K, C]`
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct ModeNormCache {
    x: Tensor,
    pub xhat: Tensor,
    /// Per-sample channel means, `[N, C]`.
    channel_mean: Vec<f64>,
    /// Gate values `[N, K]`.
    pub gates: Tensor,
    /// Gate-weighted moments `[K, C]`.
    pub mean: Tensor,
    pub var: Tensor,
    inv_std: Vec<f64>,
    mode_mass: Vec<f64>,
    gamma: Vec<f64>,
    gate_weight: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModeNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
    pub dgate_weight: Tensor,
    pub dgate_bias: Tensor,
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

impl ModeNorm {
    /// Gate weights start at `normal(0, 0.1)`, biases at zero.
    pub fn new(channels: usize, modes: usize, rng: &mut Rng) -> Result<Self> {
        if modes == 0 {
            return Err(Error::Config("mode norm needs K ≥ 1".into()));
        }
        Ok(Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            gate_weight: Tensor::create(&[modes, channels], Fill::Normal { mean: 0.0, std: 0.1 }, Some(rng))?,
            gate_bias: Tensor::zeros(&[modes]),
            running_mean: Tensor::zeros(&[modes, channels]),
            running_var: Tensor::ones(&[modes, channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            updates: 0,
        })
    }

    pub fn modes(&self) -> usize {
        self.gate_bias.len()
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, l) = x.dims3()?;
        let k = self.modes();
        if self.channels() != c || self.beta.len() != c {
            return Err(Error::Shape(format!("mode norm built for {} channels, got {c}", self.channels())));
        }
        if self.gate_weight.shape() != [k, c] {
            return Err(Error::Shape(format!("gate weight shape {:?}", self.gate_weight.shape())));
        }
        check_params(self.momentum, self.eps)?;
        Ok((n, c, l, k))
    }

    /// Per-sample channel means `[N, C]` and softmax gates `[N, K]`.
    fn gates(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (n, c, l, k) = self.check(x)?;
        let mut channel_mean = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                channel_mean[s * c + ch] = x.data()[base..base + l].iter().sum::<f64>() / l as f64;
            }
        }
        let mut gates = Tensor::zeros(&[n, k]);
        for s in 0..n {
            let m = &channel_mean[s * c..(s + 1) * c];
            let row = gates.row_mut(s);
            for (mode, logit) in row.iter_mut().enumerate() {
                let w = self.gate_weight.row(mode);
                *logit = self.gate_bias.data()[mode] + w.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(row);
        }
        Ok((channel_mean, gates))
    }

    /// `x̂ = Σ_k g_k (x − μ_k) / sqrt(σ²_k + ε)` and `y = γ x̂ + β`.
    fn normalize(&self, x: &Tensor, gates: &Tensor, mean: &Tensor, inv_std: &[f64]) -> (Tensor, Tensor) {
        let (n, c, l) = x.dims3().expect("checked");
        let k = self.modes();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let v = x.data()[p];
                    let z: f64 = (0..k)
                        .map(|m| gates.data()[s * k + m] * (v - mean.data()[m * c + ch]) * inv_std[m * c + ch])
                        .sum();
                    xhat.data_mut()[p] = z;
                    y.data_mut()[p] = self.gamma.data()[ch] * z + self.beta.data()[ch];
                }
            }
        }
        (xhat, y)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ModeNormCache)> {
        let (n, c, l, k) = self.check(x)?;
        let (channel_mean, gates) = self.gates(x)?;
        let mut mode_mass = vec![0.0; k];
        let mut mean = Tensor::zeros(&[k, c]);
        let mut var = Tensor::zeros(&[k, c]);
        for m in 0..k {
            mode_mass[m] = (0..n).map(|s| gates.data()[s * k + m]).sum::<f64>() * l as f64;
            if !(mode_mass[m] > 0.0) {
                return Err(Error::EmptyComponent(m));
            }
            for ch in 0..c {
                let mut acc = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * l;
                    acc += gates.data()[s * k + m] * x.data()[base..base + l].iter().sum::<f64>();
                }
                let mu = acc / mode_mass[m];
                let mut acc = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * l;
                    let sq: f64 = x.data()[base..base + l].iter().map(|v| (v - mu) * (v - mu)).sum();
                    acc += gates.data()[s * k + m] * sq;
                }
                mean.data_mut()[m * c + ch] = mu;
                var.data_mut()[m * c + ch] = acc / mode_mass[m];
            }
        }
        let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x, &gates, &mean, &inv_std);
        y.ensure_finite("mode norm output")?;
        let cache = ModeNormCache {
            x: x.clone(),
            xhat,
            channel_mean,
            gates,
            mean,
            var,
            inv_std,
            mode_mass,
            gamma: self.gamma.data().to_vec(),
            gate_weight: self.gate_weight.clone(),
        };
        Ok((y, cache))
    }

    /// Folds a training batch's per-mode moments into the running statistics.
    pub fn update_running(&mut self, cache: &ModeNormCache) -> Result<()> {
        check_same_shape(&self.running_mean, &cache.mean, "mode norm running mean")?;
        ema(self.running_mean.data_mut(), cache.mean.data(), self.momentum);
        ema(self.running_var.data_mut(), cache.var.data(), self.momentum);
        self.updates += 1;
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized("mode norm running statistics never updated".into()));
        }
        let (_, gates) = self.gates(x)?;
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (_, y) = self.normalize(x, &gates, &self.running_mean, &inv_std);
        y.ensure_finite("mode norm output")?;
        Ok(y)
    }
}

pub fn modenorm_backward(cache: &ModeNormCache, dy: &Tensor) -> Result<ModeNormGrads> {
    check_same_shape(&cache.x, dy, "modenorm_backward dy")?;
    let (n, c, l) = dy.dims3()?;
    let k = cache.mode_mass.len();
    let x = cache.x.data();
    let g = cache.gates.data();

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dxhat = vec![0.0; dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * l;
            for p in base..base + l {
                dgamma.data_mut()[ch] += dy.data()[p] * cache.xhat.data()[p];
                dbeta.data_mut()[ch] += dy.data()[p];
                dxhat[p] = dy.data()[p] * cache.gamma[ch];
            }
        }
    }

    // Gradients of the per-mode moments, through the standardized terms only.
    let mut dmean = vec![0.0; k * c];
    let mut dvar = vec![0.0; k * c];
    for m in 0..k {
        for ch in 0..c {
            let mu = cache.mean.data()[m * c + ch];
            let inv = cache.inv_std[m * c + ch];
            let (mut dm, mut dv) = (0.0, 0.0);
            for s in 0..n {
                let gate = g[s * k + m];
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let dz = dxhat[p] * gate;
                    dm -= dz * inv;
                    dv -= 0.5 * dz * (x[p] - mu) * inv * inv * inv;
                }
            }
            dmean[m * c + ch] = dm;
            dvar[m * c + ch] = dv;
        }
    }

    let mut dx = Tensor::zeros(dy.shape());
    let mut dgate = vec![0.0; n * k];
    for s in 0..n {
        for m in 0..k {
            let gate = g[s * k + m];
            let mass = cache.mode_mass[m];
            let mut dg = 0.0;
            for ch in 0..c {
                let mc = m * c + ch;
                let (mu, var, inv) = (cache.mean.data()[mc], cache.var.data()[mc], cache.inv_std[mc]);
                let base = (s * c + ch) * l;
                for p in base..base + l {
                    let centered = x[p] - mu;
                    let z = centered * inv;
                    dx.data_mut()[p] += dxhat[p] * gate * inv
                        + dmean[mc] * gate / mass
                        + dvar[mc] * gate * 2.0 * centered / mass;
                    dg += dxhat[p] * z
                        + (dmean[mc] * centered + dvar[mc] * (centered * centered - var)) / mass;
                }
            }
            dgate[s * k + m] = dg;
        }
    }

    // Softmax, then the affine gate on the channel means.
    let mut dgate_weight = Tensor::zeros(&[k, c]);
    let mut dgate_bias = Tensor::zeros(&[k]);
    for s in 0..n {
        let dot: f64 = (0..k).map(|m| g[s * k + m] * dgate[s * k + m]).sum();
        let means = &cache.channel_mean[s * c..(s + 1) * c];
        let mut dmeans = vec![0.0; c];
        for m in 0..k {
            let dlogit = g[s * k + m] * (dgate[s * k + m] - dot);
            dgate_bias.data_mut()[m] += dlogit;
            let w = cache.gate_weight.row(m);
            for ch in 0..c {
                dgate_weight.data_mut()[m * c + ch] += dlogit * means[ch];
                dmeans[ch] += dlogit * w[ch];
            }
        }
        for ch in 0..c {
            let base = (s * c + ch) * l;
            for p in base..base + l {
                dx.data_mut()[p] += dmeans[ch] / l as f64;
            }
        }
    }

    Ok(ModeNormGrads { dx, dgamma, dbeta, dgate_weight, dgate_bias })
}
