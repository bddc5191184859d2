//! Diagonal-covariance Gaussian mixtures: density, posteriors, weighted
//! moments and expectation-maximization.

use serde::{Deserialize, Serialize};

use crate::contexts::kmeanspp_seeds;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound applied to every component variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Below this total responsibility a component counts as collapsed.
const COLLAPSE_MASS: f64 = 1e-12;

/// Mixture weights `[K]`, means `[K, D]` and diagonal variances `[K, D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Tensor,
    pub means: Tensor,
    pub vars: Tensor,
}

impl GmmParams {
    pub fn new(weights: Tensor, means: Tensor, vars: Tensor) -> Result<Self> {
        let gmm = Self { weights, means, vars };
        gmm.validate()?;
        Ok(gmm)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// Checks shapes, the simplex constraint on the weights and the variance
    /// floor.
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        let (mk, d) = self.means.dims2()?;
        if mk != k || self.vars.shape() != [k, d] {
            return Err(Error::Shape(format!(
                "mixture of {k} components has means {:?} and variances {:?}",
                self.means.shape(),
                self.vars.shape()
            )));
        }
        if let Some(i) = self.weights.data().iter().position(|&w| !(w > 0.0)) {
            return Err(Error::InvalidMixture(format!("weight {i} is {}", self.weights.data()[i])));
        }
        let total: f64 = self.weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        if self.vars.data().iter().any(|&v| !(v >= VAR_FLOOR)) {
            return Err(Error::InvalidMixture(format!("variance below floor {VAR_FLOOR}")));
        }
        if !self.means.is_finite() {
            return Err(Error::NonFinite("mixture means".into()));
        }
        Ok(())
    }
}

/// Log density of a diagonal-covariance normal:
/// `−½ Σ_d [log(2π σ²_d) + (x_d − m_d)² / σ²_d]`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((xv, m), v)| ln_2pi + v.ln() + (xv - m) * (xv - m) / v)
        .sum::<f64>()
}

/// Per-component constants of diagonal Gaussian log densities, so repeated
/// evaluations skip the logarithms and divisions.
pub(crate) struct DiagLogPdf {
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
    dim: usize,
}

impl DiagLogPdf {
    /// `vars` is `[K, D]`.
    pub(crate) fn new(vars: &Tensor) -> Self {
        let dim = vars.shape()[1];
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_norm = vars.data().chunks(dim.max(1)).map(|row| -0.5 * row.iter().map(|v| ln_2pi + v.ln()).sum::<f64>()).collect();
        Self { log_norm, inv_var: vars.data().iter().map(|v| 1.0 / v).collect(), dim }
    }

    pub(crate) fn eval(&self, k: usize, x: &[f64], mean: &[f64]) -> f64 {
        let inv = &self.inv_var[k * self.dim..(k + 1) * self.dim];
        let quad: f64 = x.iter().zip(mean).zip(inv).map(|((xv, m), iv)| (xv - m) * (xv - m) * iv).sum();
        self.log_norm[k] - 0.5 * quad
    }
}

/// Writes `exp(s_k) / Σ_j exp(s_j)` into `out`, shifting by the maximum
/// first. Dividing by the sum of the shifted terms (rather than subtracting a
/// log-sum-exp) keeps rows summing to one even when scores are huge.
pub(crate) fn normalize_scores(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_data(x: &Tensor, gmm: &GmmParams) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if d != gmm.dim() {
        return Err(Error::Shape(format!("data has dimension {d}, mixture {}", gmm.dim())));
    }
    Ok((n, d))
}

/// Row-stochastic posteriors plus each point's log density `log p(x_i)`.
fn posteriors_and_log_density(x: &Tensor, gmm: &GmmParams) -> Result<(Tensor, Vec<f64>)> {
    let (n, _) = check_data(x, gmm)?;
    let k = gmm.components();
    let log_weights: Vec<f64> = gmm.weights.data().iter().map(|w| w.ln()).collect();
    let mut post = Tensor::zeros(&[n, k]);
    let mut log_density = vec![0.0; n];
    let mut joint = vec![0.0; k];
    let pdf = DiagLogPdf::new(&gmm.vars);
    for i in 0..n {
        let xi = x.row(i);
        for (c, j) in joint.iter_mut().enumerate() {
            *j = log_weights[c] + pdf.eval(c, xi, gmm.means.row(c));
        }
        log_density[i] = log_sum_exp(&joint);
        normalize_scores(&joint, post.row_mut(i));
    }
    Ok((post, log_density))
}

/// `p(k | x_i) = λ_k p(x_i | k) / Σ_l λ_l p(x_i | l)`, computed in log space.
pub fn posteriors(x: &Tensor, gmm: &GmmParams) -> Result<Tensor> {
    gmm.validate()?;
    Ok(posteriors_and_log_density(x, gmm)?.0)
}

/// Total data log-likelihood `Σ_i log p(x_i)`.
pub fn log_likelihood(x: &Tensor, gmm: &GmmParams) -> Result<f64> {
    gmm.validate()?;
    Ok(posteriors_and_log_density(x, gmm)?.1.iter().sum())
}

/// Responsibility-weighted moments of the rows of `x`.
///
/// Each row of `r` is first divided by its sum, so unnormalized
/// responsibilities are accepted; then
/// `μ_k = Σ_j r̃_jk x_j / Σ_j r̃_jk` and
/// `σ²_k = Σ_j r̃_jk (x_j − μ_k)² / Σ_j r̃_jk`.
pub fn weighted_moments(x: &Tensor, r: &Tensor) -> Result<(Tensor, Tensor)> {
    let (mean, var, _) = weighted_moments_with_mass(x, r)?;
    Ok((mean, var))
}

/// As [`weighted_moments`], also returning the per-component mass `Σ_j r̃_jk`.
pub(crate) fn weighted_moments_with_mass(x: &Tensor, r: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    moments_inner(x, r, None)
}

/// As [`weighted_moments`], but a component with zero total responsibility
/// takes its moments from `fallback` (`[K, D]` means and variances) instead
/// of failing. Such a component contributes nothing to any row, so the
/// fallback only has to be finite.
pub(crate) fn weighted_moments_or(
    x: &Tensor,
    r: &Tensor,
    fallback_mean: &Tensor,
    fallback_var: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (mean, var, _) = moments_inner(x, r, Some((fallback_mean, fallback_var)))?;
    Ok((mean, var))
}

fn moments_inner(
    x: &Tensor,
    r: &Tensor,
    fallback: Option<(&Tensor, &Tensor)>,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let (rn, k) = r.dims2()?;
    if rn != n {
        return Err(Error::Shape(format!("{rn} responsibility rows for {n} points")));
    }
    if r.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Config("responsibilities must be non-negative".into()));
    }
    let row_norm: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = r.row(i).iter().sum();
            if s > 0.0 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let mut mass = vec![0.0; k];
    let mut mean = Tensor::zeros(&[k, d]);
    let mut var = Tensor::zeros(&[k, d]);
    for c in 0..k {
        let m = mean.row_mut(c);
        for i in 0..n {
            let w = r.row(i)[c] * row_norm[i];
            mass[c] += w;
            for (acc, xv) in m.iter_mut().zip(x.row(i)) {
                *acc += w * xv;
            }
        }
        if !(mass[c] > 0.0) {
            match fallback {
                Some((fm, fv)) => {
                    mean.row_mut(c).copy_from_slice(fm.row(c));
                    var.row_mut(c).copy_from_slice(fv.row(c));
                    continue;
                }
                None => return Err(Error::EmptyComponent(c)),
            }
        }
        for v in m.iter_mut() {
            *v /= mass[c];
        }
        let mu = mean.row(c).to_vec();
        let s = var.row_mut(c);
        for i in 0..n {
            let w = r.row(i)[c] * row_norm[i];
            for ((acc, xv), m) in s.iter_mut().zip(x.row(i)).zip(&mu) {
                *acc += w * (xv - m) * (xv - m);
            }
        }
        for v in s.iter_mut() {
            *v /= mass[c];
        }
    }
    Ok((mean, var, mass))
}

fn data_variance(x: &Tensor) -> Vec<f64> {
    let (n, d) = x.dims2().expect("matrix");
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    var.iter().map(|v| v.max(VAR_FLOOR)).collect()
}

/// One EM iteration. Returns the updated mixture and the log-likelihood of
/// the data under the mixture *before* the update.
///
/// A component whose total responsibility falls below `1e-12` is reseeded at
/// the worst-explained point with the data's per-dimension variance.
pub fn em_step(x: &Tensor, gmm: &GmmParams) -> Result<(GmmParams, f64)> {
    gmm.validate()?;
    let (n, d) = check_data(x, gmm)?;
    let k = gmm.components();
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for {k} components")));
    }
    let (post, log_density) = posteriors_and_log_density(x, gmm)?;
    let loglik: f64 = log_density.iter().sum();

    let mut mass = vec![0.0; k];
    for i in 0..n {
        for (m, p) in mass.iter_mut().zip(post.row(i)) {
            *m += p;
        }
    }
    let collapsed: Vec<usize> = (0..k).filter(|&c| mass[c] < COLLAPSE_MASS).collect();
    let live: Vec<usize> = (0..k).filter(|&c| mass[c] >= COLLAPSE_MASS).collect();

    let mut means = Tensor::zeros(&[k, d]);
    let mut vars = Tensor::zeros(&[k, d]);
    let mut weights = vec![0.0; k];
    if !live.is_empty() {
        let mut live_post = Tensor::zeros(&[n, live.len()]);
        for i in 0..n {
            for (j, &c) in live.iter().enumerate() {
                live_post.row_mut(i)[j] = post.row(i)[c];
            }
        }
        // Posterior rows already sum to one, so the row normalization inside
        // weighted_moments is the identity here.
        let (m, v, live_mass) = weighted_moments_with_mass(x, &live_post)?;
        for (j, &c) in live.iter().enumerate() {
            means.row_mut(c).copy_from_slice(m.row(j));
            for (dst, src) in vars.row_mut(c).iter_mut().zip(v.row(j)) {
                *dst = src.max(VAR_FLOOR);
            }
            weights[c] = live_mass[j];
        }
    }
    if !collapsed.is_empty() {
        let spread = data_variance(x);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| log_density[a].total_cmp(&log_density[b]).then(a.cmp(&b)));
        for (slot, &c) in collapsed.iter().enumerate() {
            let point = order[slot % n];
            means.row_mut(c).copy_from_slice(x.row(point));
            vars.row_mut(c).copy_from_slice(&spread);
            weights[c] = 1.0;
        }
    }
    let total: f64 = weights.iter().sum();
    let weights = Tensor::from_vec(&[k], weights.iter().map(|w| w / total).collect())?;
    Ok((GmmParams::new(weights, means, vars)?, loglik))
}

/// Seeds a `K`-component mixture with k-means++ and runs EM until the
/// log-likelihood changes by less than `tol` or `max_iters` steps are taken.
pub fn em_fit(x: &Tensor, k: usize, rng: &mut Rng, max_iters: usize, tol: f64) -> Result<GmmParams> {
    let (n, d) = x.dims2()?;
    if k == 0 {
        return Err(Error::Config("mixture needs K ≥ 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for {k} components")));
    }
    if max_iters == 0 {
        return Err(Error::Config("em_fit needs max_iters ≥ 1".into()));
    }
    let seeds = kmeanspp_seeds(x, k, rng)?;
    let spread = data_variance(x);
    let mut means = Tensor::zeros(&[k, d]);
    let mut vars = Tensor::zeros(&[k, d]);
    for (c, &i) in seeds.iter().enumerate() {
        means.row_mut(c).copy_from_slice(x.row(i));
        vars.row_mut(c).copy_from_slice(&spread);
    }
    let weights = Tensor::full(&[k], 1.0 / k as f64);
    let gmm = GmmParams::new(weights, means, vars)?;
    em_refine(x, &gmm, max_iters, tol)
}

/// Warm-started EM: at most `max_iters` steps from `gmm`, stopping early
/// when the log-likelihood change drops below `tol`.
pub fn em_refine(x: &Tensor, gmm: &GmmParams, max_iters: usize, tol: f64) -> Result<GmmParams> {
    let mut current = gmm.clone();
    let mut previous: Option<f64> = None;
    for _ in 0..max_iters {
        let (next, loglik) = em_step(x, &current)?;
        current = next;
        if let Some(prev) = previous {
            if (loglik - prev).abs() < tol {
                break;
            }
        }
        previous = Some(loglik);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let lp = gaussian_logpdf(&[0.0], &[0.0], &[1.0]);
        assert!((lp - (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-15);
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn at_mean_is_normalizer_only() {
        let var = [0.5, 2.0, 3.0];
        let lp = gaussian_logpdf(&[1.0, -2.0, 4.0], &[1.0, -2.0, 4.0], &var);
        let want: f64 = var.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn product_of_one_dimensional_densities() {
        let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let want = (pdf(1.0, 0.0, 1.0) * pdf(1.0, 0.0, 4.0)).ln();
        assert!((gaussian_logpdf(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 4.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn cached_densities_match_direct_evaluation() {
        let vars = t(&[2, 3], &[0.5, 1.0, 4.0, 2.0, 0.1, 9.0]);
        let means = t(&[2, 3], &[0.0, 1.0, -2.0, 3.0, 0.5, 0.0]);
        let pdf = DiagLogPdf::new(&vars);
        for x in [[0.0, 0.0, 0.0], [1.5, -2.0, 7.0], [40.0, -3.0, 0.25]] {
            for k in 0..2 {
                let direct = gaussian_logpdf(&x, means.row(k), vars.row(k));
                assert!((pdf.eval(k, &x, means.row(k)) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_component_posteriors_are_one() {
        let gmm = GmmParams::new(t(&[1], &[1.0]), t(&[1, 2], &[0.0, 0.0]), t(&[1, 2], &[1.0, 1.0])).unwrap();
        let x = t(&[3, 2], &[1.0, 2.0, -40.0, 3.0, 0.0, 0.0]);
        assert!(posteriors(&x, &gmm).unwrap().data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let gmm = GmmParams::new(t(&[2], &[0.5, 0.5]), t(&[2, 1], &[-3.0, 3.0]), t(&[2, 1], &[2.0, 2.0])).unwrap();
        let p = posteriors(&t(&[1, 1], &[0.0]), &gmm).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn far_points_still_normalize() {
        let gmm = GmmParams::new(t(&[2], &[0.3, 0.7]), t(&[2, 1], &[0.0, 1.0]), t(&[2, 1], &[1.0, 1.0])).unwrap();
        let p = posteriors(&t(&[2, 1], &[50.0, -50.0]), &gmm).unwrap();
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let bad = GmmParams::new(t(&[2], &[1.0, 0.0]), t(&[2, 1], &[0.0, 1.0]), t(&[2, 1], &[1.0, 1.0]));
        assert!(matches!(bad, Err(Error::InvalidMixture(_))));
        let bad = GmmParams::new(t(&[1], &[1.0]), t(&[1, 1], &[0.0]), t(&[1, 1], &[1e-9]));
        assert!(matches!(bad, Err(Error::InvalidMixture(_))));
    }

    #[test]
    fn one_hot_responsibilities_give_group_moments() {
        let x = t(&[4, 1], &[1.0, 3.0, 10.0, 20.0]);
        let r = t(&[4, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let (m, v) = weighted_moments(&x, &r).unwrap();
        assert_eq!(m.data(), &[2.0, 15.0]);
        assert_eq!(v.data(), &[1.0, 25.0]);
    }

    #[test]
    fn uniform_responsibilities_give_global_moments() {
        let x = t(&[3, 1], &[1.0, 2.0, 6.0]);
        let (m, v) = weighted_moments(&x, &Tensor::full(&[3, 2], 0.5)).unwrap();
        assert_eq!(m.data(), &[3.0, 3.0]);
        assert!((v.data()[0] - 14.0 / 3.0).abs() < 1e-12);
        assert_eq!(v.data()[0], v.data()[1]);
    }

    #[test]
    fn empty_column_is_an_error() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let r = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(weighted_moments(&x, &r), Err(Error::EmptyComponent(1)));
    }

    #[test]
    fn converged_configuration_is_a_fixed_point() {
        let x = t(&[6, 2], &[0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, -4.0, 3.0]);
        let gmm = GmmParams::new(
            t(&[3], &[2.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0]),
            t(&[3, 2], &[0.0, 0.0, 5.0, 5.0, -4.0, 3.0]),
            Tensor::full(&[3, 2], VAR_FLOOR),
        )
        .unwrap();
        let (next, _) = em_step(&x, &gmm).unwrap();
        assert!(next.weights.max_abs_diff(&gmm.weights) < 1e-10);
        assert!(next.means.max_abs_diff(&gmm.means) < 1e-10);
        assert!(next.vars.max_abs_diff(&gmm.vars) < 1e-10);
    }

    #[test]
    fn single_component_step_is_closed_form() {
        let x = Tensor::create(&[20, 3], Fill::Normal { mean: 1.0, std: 2.0 }, Some(&mut Rng::new(5))).unwrap();
        let gmm = GmmParams::new(t(&[1], &[1.0]), Tensor::zeros(&[1, 3]), Tensor::ones(&[1, 3])).unwrap();
        let (next, _) = em_step(&x, &gmm).unwrap();
        for d in 0..3 {
            let col: Vec<f64> = (0..20).map(|i| x.row(i)[d]).collect();
            let mu = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 20.0;
            assert!((next.means.data()[d] - mu).abs() < 1e-12);
            assert!((next.vars.data()[d] - var).abs() < 1e-12);
        }
        let fitted = em_fit(&x, 1, &mut Rng::new(0), 100, 1e-6).unwrap();
        assert_eq!(fitted, next);
    }

    #[test]
    fn collapsed_component_is_reseeded() {
        let x = t(&[4, 1], &[0.0, 0.1, -0.1, 0.05]);
        let gmm =
            GmmParams::new(t(&[2], &[0.5, 0.5]), t(&[2, 1], &[0.0, 1e6]), t(&[2, 1], &[1.0, VAR_FLOOR])).unwrap();
        let (next, _) = em_step(&x, &gmm).unwrap();
        assert!(next.validate().is_ok());
        assert!(next.means.data()[1].abs() <= 0.1);
    }

    #[test]
    fn fit_is_deterministic_and_needs_data() {
        let x = Tensor::create(&[30, 2], Fill::Normal { mean: 0.0, std: 1.0 }, Some(&mut Rng::new(1))).unwrap();
        let a = em_fit(&x, 3, &mut Rng::new(9), 50, 1e-6).unwrap();
        let b = em_fit(&x, 3, &mut Rng::new(9), 50, 1e-6).unwrap();
        assert_eq!(a, b);
        assert!(matches!(em_fit(&x, 31, &mut Rng::new(9), 50, 1e-6), Err(Error::InsufficientData(_))));
    }
}
