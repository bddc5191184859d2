//! One enum over every normalization layer so models can swap them freely.

use serde::{Deserialize, Serialize};

use ctxnorm::context::{
    acn_backward, acn_forward, acn_init, cn_backward, cnx_backward, cnx_forward, AcnCache, AcnParams, CnCache,
    CnxCache, CnxParams, ContextNorm,
};
use ctxnorm::norm::{
    bn_backward, ln_backward, mixnorm_backward, mixnorm_forward, modenorm_backward, BatchNorm, BnCache, LayerNorm,
    LnCache, MixNorm, MixNormCache, ModeNorm, ModeNormCache,
};
use ctxnorm::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Bn,
    Ln,
    ModeNorm,
    MixNorm,
    Cn,
    Cnx,
    Acn,
}

impl NormKind {
    /// Every method of the comparison, in reporting order.
    pub const METHODS: [NormKind; 7] = [
        NormKind::Bn,
        NormKind::Ln,
        NormKind::ModeNorm,
        NormKind::MixNorm,
        NormKind::Cn,
        NormKind::Cnx,
        NormKind::Acn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Bn => "bn",
            NormKind::Ln => "ln",
            NormKind::ModeNorm => "modenorm",
            NormKind::MixNorm => "mixnorm",
            NormKind::Cn => "cn",
            NormKind::Cnx => "cnx",
            NormKind::Acn => "acn",
        }
    }

    /// Whether the layer needs per-sample context ids.
    pub fn needs_contexts(self) -> bool {
        matches!(self, NormKind::Cn | NormKind::Cnx)
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [NormKind::None]
            .into_iter()
            .chain(NormKind::METHODS)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm kind {s:?}")))
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which normalization to build, with its context count. `lambdas` are the
/// dataset context proportions, required by CN and CN-X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

impl NormSpec {
    pub fn new(kind: NormKind, k: usize) -> Self {
        Self { kind, k, lambdas: None }
    }

    pub fn none() -> Self {
        Self::new(NormKind::None, 1)
    }

    pub fn with_lambdas(mut self, lambdas: Vec<f64>) -> Self {
        self.k = lambdas.len();
        self.lambdas = Some(lambdas);
        self
    }
}

/// How a forward pass treats batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated, mixtures refreshed.
    Train,
    /// Batch statistics with no state change; differentiable.
    Probe,
    /// Running statistics. Layers that were never trained fall back to
    /// batch statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormLayer {
    None,
    Batch(BatchNorm),
    Layer(LayerNorm),
    Mode(ModeNorm),
    Mixture(MixNorm),
    Context(ContextNorm),
    ContextX(CnxParams),
    Adaptive(AcnParams),
}

#[derive(Debug, Clone)]
pub enum NormCache {
    None,
    Batch(BnCache),
    Layer(LnCache),
    Mode(ModeNormCache),
    Mixture(MixNormCache),
    Context(CnCache),
    ContextX(CnxCache),
    Adaptive(AcnCache),
    /// Eval-mode pass; not differentiable.
    Frozen,
}

impl NormLayer {
    pub fn build(spec: &NormSpec, channels: usize, rng: &mut Rng) -> Result<Self> {
        if spec.k == 0 {
            return Err(Error::Config("norm layer needs K ≥ 1".into()));
        }
        let lambdas = || {
            spec.lambdas
                .clone()
                .ok_or_else(|| Error::Config(format!("{} needs context proportions", spec.kind)))
        };
        Ok(match spec.kind {
            NormKind::None => NormLayer::None,
            NormKind::Bn => NormLayer::Batch(BatchNorm::new(channels)),
            NormKind::Ln => NormLayer::Layer(LayerNorm::new(channels)),
            NormKind::ModeNorm => NormLayer::Mode(ModeNorm::new(channels, spec.k, rng)?),
            NormKind::MixNorm => NormLayer::Mixture(MixNorm::new(channels, spec.k, rng.next_u64())?),
            NormKind::Cn => NormLayer::Context(ContextNorm::new(channels, lambdas()?)?),
            NormKind::Cnx => NormLayer::ContextX(CnxParams::new(channels, lambdas()?, rng)?),
            NormKind::Acn => NormLayer::Adaptive(acn_init(spec.k, channels, rng)?),
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::None => NormKind::None,
            NormLayer::Batch(_) => NormKind::Bn,
            NormLayer::Layer(_) => NormKind::Ln,
            NormLayer::Mode(_) => NormKind::ModeNorm,
            NormLayer::Mixture(_) => NormKind::MixNorm,
            NormLayer::Context(_) => NormKind::Cn,
            NormLayer::ContextX(_) => NormKind::Cnx,
            NormLayer::Adaptive(_) => NormKind::Acn,
        }
    }

    pub fn forward(&mut self, x: &Tensor, ids: Option<&[usize]>, mode: Mode) -> Result<(Tensor, NormCache)> {
        let kind = self.kind();
        let ids = || ids.ok_or_else(|| Error::Config(format!("{kind} layer needs context ids")));
        let train = mode == Mode::Train;
        Ok(match self {
            NormLayer::None => (x.clone(), NormCache::None),
            NormLayer::Batch(bn) => {
                if mode == Mode::Eval && bn.is_initialized() {
                    (bn.forward_eval(x)?, NormCache::Frozen)
                } else {
                    let (y, cache) = bn.forward_train(x)?;
                    if train {
                        bn.update_running(&cache.mean, &cache.var)?;
                    }
                    (y, NormCache::Batch(cache))
                }
            }
            NormLayer::Layer(ln) => {
                let (y, cache) = ln.forward(x)?;
                (y, NormCache::Layer(cache))
            }
            NormLayer::Mode(mn) => {
                if mode == Mode::Eval && mn.is_initialized() {
                    (mn.forward_eval(x)?, NormCache::Frozen)
                } else {
                    let (y, cache) = mn.forward_train(x)?;
                    if train {
                        mn.update_running(&cache)?;
                    }
                    (y, NormCache::Mode(cache))
                }
            }
            NormLayer::Mixture(mix) => {
                if mode == Mode::Eval && mix.is_initialized() {
                    (mix.forward_eval(x)?, NormCache::Frozen)
                } else if train {
                    mix.refresh_mixture(x)?;
                    let (y, cache) = mix.forward_train(x)?;
                    mix.update_running(&cache)?;
                    (y, NormCache::Mixture(cache))
                } else {
                    let gmm = mix.mixture_for(x)?;
                    let (y, cache) = mixnorm_forward(x, &gmm, &mix.gamma, &mix.beta, mix.eps)?;
                    (y, NormCache::Mixture(cache))
                }
            }
            NormLayer::Context(cn) => {
                let ids = ids()?;
                if mode == Mode::Eval && ids.iter().all(|&k| cn.updated.get(k).copied().unwrap_or(false)) {
                    (cn.forward_eval(x, ids)?, NormCache::Frozen)
                } else {
                    let (y, cache) = cn.forward_train(x, ids)?;
                    if train {
                        cn.update_running(&cache)?;
                    }
                    (y, NormCache::Context(cache))
                }
            }
            NormLayer::ContextX(p) => {
                let (y, cache) = cnx_forward(x, ids()?, p)?;
                (y, NormCache::ContextX(cache))
            }
            NormLayer::Adaptive(p) => {
                let (y, cache) = acn_forward(x, p)?;
                (y, NormCache::Adaptive(cache))
            }
        })
    }

    /// Input gradient plus parameter gradients in [`NormLayer::params_mut`]
    /// order.
    pub fn backward(&self, cache: &NormCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(match cache {
            NormCache::None => (dy.clone(), Vec::new()),
            NormCache::Batch(c) => {
                let g = bn_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta])
            }
            NormCache::Layer(c) => {
                let g = ln_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta])
            }
            NormCache::Mode(c) => {
                let g = modenorm_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta, g.dgate_weight, g.dgate_bias])
            }
            NormCache::Mixture(c) => {
                let g = mixnorm_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta])
            }
            NormCache::Context(c) => {
                let g = cn_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta])
            }
            NormCache::ContextX(c) => {
                let g = cnx_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta, g.dmu, g.dlog_var])
            }
            NormCache::Adaptive(c) => {
                let g = acn_backward(c, dy)?;
                (g.dx, vec![g.dgamma, g.dbeta, g.dlogit_lambda, g.dmeans, g.dlog_var])
            }
            NormCache::Frozen => {
                return Err(Error::Config("cannot backpropagate through an eval-mode pass".into()));
            }
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            NormLayer::None => Vec::new(),
            NormLayer::Batch(l) => vec![&mut l.gamma, &mut l.beta],
            NormLayer::Layer(l) => vec![&mut l.gamma, &mut l.beta],
            NormLayer::Mode(l) => vec![&mut l.gamma, &mut l.beta, &mut l.gate_weight, &mut l.gate_bias],
            NormLayer::Mixture(l) => vec![&mut l.gamma, &mut l.beta],
            NormLayer::Context(l) => vec![&mut l.gamma, &mut l.beta],
            NormLayer::ContextX(p) => vec![&mut p.gamma, &mut p.beta, &mut p.mu, &mut p.log_var],
            NormLayer::Adaptive(p) => {
                vec![&mut p.gamma, &mut p.beta, &mut p.logit_lambda, &mut p.means, &mut p.log_var]
            }
        }
    }
}
