use super::{finite_diff_grad, max_rel_error, probe_loss};
use crate::context::{acn_backward, acn_forward, acn_init, cn_backward, cnx_backward, cnx_forward, ContextNorm, CnxParams};
use crate::error::Result;
use crate::gmm::em_fit;
use crate::norm::{
    bn_backward, ln_backward, ln_forward, mixnorm_backward, mixnorm_forward, mixnorm_forward_frozen,
    modenorm_backward, BatchNorm, ModeNorm,
};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};

/// Settings for [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub k: usize,
    pub eps: f64,
    /// Finite-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Tolerance for the adaptive layer, whose posteriors make the oracle
    /// noisier.
    pub acn_tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            n: 4,
            c: 3,
            l: 2,
            k: 2,
            eps: 1e-3,
            h: 1e-5,
            tolerance: 1e-5,
            acn_tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Outcome for one layer across all seeds.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: &'static str,
    /// Worst relative error over seeds and gradients, with the gradient name.
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

pub const LAYERS: [&str; 7] = ["bn", "ln", "modenorm", "mixnorm-frozen", "cn", "cnx", "acn"];

struct Tally {
    worst: f64,
    name: String,
    floor: f64,
}

impl Tally {
    fn add(&mut self, name: &str, analytic: &Tensor, numeric: Tensor) {
        let err = max_rel_error(analytic, &numeric, self.floor);
        if err > self.worst || self.name.is_empty() {
            self.worst = err;
            self.name = name.to_string();
        }
    }
}

fn normal(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    Tensor::create(shape, Fill::Normal { mean: 0.0, std: 1.0 }, Some(rng))
}

/// Compares every analytic gradient of every layer against central
/// differences of the probe loss `Σ w·y`.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    for layer in LAYERS {
        let mut tally = Tally { worst: 0.0, name: String::new(), floor: cfg.floor };
        for &seed in &cfg.seeds {
            check_layer(layer, seed, cfg, &mut tally)?;
        }
        let tolerance = if layer == "acn" { cfg.acn_tolerance } else { cfg.tolerance };
        out.push(LayerCheck {
            layer,
            max_rel_error: tally.worst,
            worst: tally.name,
            tolerance,
            passed: tally.worst < tolerance,
        });
    }
    Ok(out)
}

fn check_layer(layer: &str, seed: u64, cfg: &SuiteConfig, t: &mut Tally) -> Result<()> {
    let (n, c, l, k, h) = (cfg.n, cfg.c, cfg.l, cfg.k, cfg.h);
    let mut rng = Rng::with_stream(seed, 17);
    let x = normal(&[n, c, l], &mut rng)?;
    let w = normal(&[n, c, l], &mut rng)?;
    let gamma = normal(&[c], &mut rng)?;
    let beta = normal(&[c], &mut rng)?;
    match layer {
        "bn" => {
            let bn = BatchNorm { gamma, beta, eps: cfg.eps, ..BatchNorm::new(c) };
            let (_, cache) = bn.forward_train(&x)?;
            let g = bn_backward(&cache, &w)?;
            let loss = |b: &BatchNorm, x: &Tensor| Ok(probe_loss(&b.forward_train(x)?.0, &w));
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(&bn, v), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&BatchNorm { gamma: v.clone(), ..bn.clone() }, &x), &bn.gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&BatchNorm { beta: v.clone(), ..bn.clone() }, &x), &bn.beta, h)?);
        }
        "ln" => {
            let (_, cache) = ln_forward(&x, &gamma, &beta, cfg.eps)?;
            let g = ln_backward(&cache, &w)?;
            let loss = |x: &Tensor, gm: &Tensor, bt: &Tensor| Ok(probe_loss(&ln_forward(x, gm, bt, cfg.eps)?.0, &w));
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(v, &gamma, &beta), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&x, v, &beta), &gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&x, &gamma, v), &beta, h)?);
        }
        "modenorm" => {
            let mut mn = ModeNorm::new(c, k, &mut rng)?;
            mn.gamma = gamma;
            mn.beta = beta;
            mn.eps = cfg.eps;
            mn.gate_weight = normal(&[k, c], &mut rng)?;
            mn.gate_bias = normal(&[k], &mut rng)?;
            let (_, cache) = mn.forward_train(&x)?;
            let g = modenorm_backward(&cache, &w)?;
            let loss = |m: &ModeNorm, x: &Tensor| Ok(probe_loss(&m.forward_train(x)?.0, &w));
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(&mn, v), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&ModeNorm { gamma: v.clone(), ..mn.clone() }, &x), &mn.gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&ModeNorm { beta: v.clone(), ..mn.clone() }, &x), &mn.beta, h)?);
            t.add(
                "dgate_weight",
                &g.dgate_weight,
                finite_diff_grad(|v| loss(&ModeNorm { gate_weight: v.clone(), ..mn.clone() }, &x), &mn.gate_weight, h)?,
            );
            t.add(
                "dgate_bias",
                &g.dgate_bias,
                finite_diff_grad(|v| loss(&ModeNorm { gate_bias: v.clone(), ..mn.clone() }, &x), &mn.gate_bias, h)?,
            );
        }
        "mixnorm-frozen" => {
            let gmm = em_fit(&x.positions()?, k, &mut rng, 20, 1e-8)?;
            let (_, cache) = mixnorm_forward(&x, &gmm, &gamma, &beta, cfg.eps)?;
            let g = mixnorm_backward(&cache, &w)?;
            let frozen = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
                let (y, _) = mixnorm_forward_frozen(
                    x,
                    &cache.posteriors,
                    gmm.weights.data(),
                    &cache.mean,
                    &cache.var,
                    gm,
                    bt,
                    cfg.eps,
                )?;
                Ok(probe_loss(&y, &w))
            };
            t.add("dx", &g.dx, finite_diff_grad(|v| frozen(v, &gamma, &beta), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| frozen(&x, v, &beta), &gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| frozen(&x, &gamma, v), &beta, h)?);
        }
        "cn" => {
            let ids: Vec<usize> = (0..n).map(|i| (i / 2) % k).collect();
            let lambdas = crate::contexts::context_proportions(&ids, k)?;
            let mut cn = ContextNorm::new(c, lambdas)?;
            cn.eps = cfg.eps;
            cn.gamma = normal(&[k, c], &mut rng)?;
            cn.beta = normal(&[k, c], &mut rng)?;
            let (_, cache) = cn.forward_train(&x, &ids)?;
            let g = cn_backward(&cache, &w)?;
            let loss = |m: &ContextNorm, x: &Tensor| Ok(probe_loss(&m.forward_train(x, &ids)?.0, &w));
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(&cn, v), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&ContextNorm { gamma: v.clone(), ..cn.clone() }, &x), &cn.gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&ContextNorm { beta: v.clone(), ..cn.clone() }, &x), &cn.beta, h)?);
        }
        "cnx" => {
            let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
            let lambdas = crate::contexts::context_proportions(&ids, k)?;
            let mut p = CnxParams::new(c, lambdas, &mut rng)?;
            p.eps = cfg.eps;
            p.gamma = normal(&[k, c], &mut rng)?;
            p.beta = normal(&[k, c], &mut rng)?;
            p.log_var = normal(&[k, c], &mut rng)?.map(|v| 0.5 * v);
            let (_, cache) = cnx_forward(&x, &ids, &p)?;
            let g = cnx_backward(&cache, &w)?;
            let loss = |q: &CnxParams, x: &Tensor| Ok(probe_loss(&cnx_forward(x, &ids, q)?.0, &w));
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(&p, v), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&CnxParams { gamma: v.clone(), ..p.clone() }, &x), &p.gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&CnxParams { beta: v.clone(), ..p.clone() }, &x), &p.beta, h)?);
            t.add("dmu", &g.dmu, finite_diff_grad(|v| loss(&CnxParams { mu: v.clone(), ..p.clone() }, &x), &p.mu, h)?);
            t.add(
                "dlog_var",
                &g.dlog_var,
                finite_diff_grad(|v| loss(&CnxParams { log_var: v.clone(), ..p.clone() }, &x), &p.log_var, h)?,
            );
        }
        "acn" => {
            let mut p = acn_init(k, c, &mut rng)?;
            p.eps = cfg.eps;
            p.gamma = normal(&[k, c], &mut rng)?;
            p.beta = normal(&[k, c], &mut rng)?;
            p.logit_lambda = normal(&[k], &mut rng)?;
            p.log_var = normal(&[k, c], &mut rng)?.map(|v| 0.3 * v);
            let (_, cache) = acn_forward(&x, &p)?;
            let g = acn_backward(&cache, &w)?;
            let loss = |q: &crate::context::AcnParams, x: &Tensor| Ok(probe_loss(&acn_forward(x, q)?.0, &w));
            use crate::context::AcnParams as P;
            t.add("dx", &g.dx, finite_diff_grad(|v| loss(&p, v), &x, h)?);
            t.add("dgamma", &g.dgamma, finite_diff_grad(|v| loss(&P { gamma: v.clone(), ..p.clone() }, &x), &p.gamma, h)?);
            t.add("dbeta", &g.dbeta, finite_diff_grad(|v| loss(&P { beta: v.clone(), ..p.clone() }, &x), &p.beta, h)?);
            t.add(
                "dlogit_lambda",
                &g.dlogit_lambda,
                finite_diff_grad(|v| loss(&P { logit_lambda: v.clone(), ..p.clone() }, &x), &p.logit_lambda, h)?,
            );
            t.add("dmeans", &g.dmeans, finite_diff_grad(|v| loss(&P { means: v.clone(), ..p.clone() }, &x), &p.means, h)?);
            t.add("dlog_var", &g.dlog_var, finite_diff_grad(|v| loss(&P { log_var: v.clone(), ..p.clone() }, &x), &p.log_var, h)?);
        }
        other => unreachable!("unknown layer {other}"),
    }
    Ok(())
}
