use ctxnorm::context::{acn_forward, acn_init, cnx_forward, ContextNorm, CnxParams};
use ctxnorm::contexts::{context_proportions, kmeans_fit};
use ctxnorm::gmm::{em_step, posteriors, GmmParams, VAR_FLOOR};
use ctxnorm::gradcheck::finite_diff_grad;
use ctxnorm::norm::{ln_forward, BatchNorm, ModeNorm};
use ctxnorm::tensor::masked_moments;
use ctxnorm::{Fill, Rng, Tensor};
use proptest::prelude::*;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::create(shape, Fill::Normal { mean: 0.0, std: 1.0 }, Some(rng)).unwrap()
}

/// Per-sample slice of an `[N, C, L]` tensor.
fn sample(t: &Tensor, s: usize) -> &[f64] {
    let per = t.len() / t.shape()[0];
    &t.data()[s * per..(s + 1) * per]
}

/// Ids where every context owns at least two samples.
fn balanced_ids(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut ids);
    ids
}

fn group_stats(values: &[f64]) -> (f64, f64) {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / values.len() as f64;
    (m, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permuting_samples_permutes_context_outputs(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = Rng::new(seed);
        let n = 2 * k + 2;
        let (c, l) = (3, 2);
        let x = normal(&[n, c, l], &mut rng);
        let ids = balanced_ids(n, k, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let xp = x.select_rows(&perm).unwrap();
        let idp: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let lambdas = context_proportions(&ids, k).unwrap();

        let mut cn = ContextNorm::new(c, lambdas.clone()).unwrap();
        cn.gamma = normal(&[k, c], &mut rng);
        let cnx = CnxParams::new(c, lambdas, &mut rng).unwrap();
        let acn = acn_init(k, c, &mut rng).unwrap();
        let outputs = [
            (cn.forward_train(&x, &ids).unwrap().0, cn.forward_train(&xp, &idp).unwrap().0),
            (cnx_forward(&x, &ids, &cnx).unwrap().0, cnx_forward(&xp, &idp, &cnx).unwrap().0),
            (acn_forward(&x, &acn).unwrap().0, acn_forward(&xp, &acn).unwrap().0),
        ];
        for (y, yp) in outputs {
            for (j, &i) in perm.iter().enumerate() {
                for (a, b) in sample(&y, i).iter().zip(sample(&yp, j)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn changing_one_context_leaves_others_alone(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let (n, c, l, k) = (8, 2, 3, 2);
        let x = normal(&[n, c, l], &mut rng);
        let ids = balanced_ids(n, k, &mut rng);
        let lambdas = context_proportions(&ids, k).unwrap();
        let victim = (0..n).find(|&s| ids[s] == 0).unwrap();
        let mut x2 = x.clone();
        let per = c * l;
        for v in &mut x2.data_mut()[victim * per..(victim + 1) * per] {
            *v += shift * rng.uniform(0.5, 1.5);
        }
        let cn = ContextNorm::new(c, lambdas.clone()).unwrap();
        let cnx = CnxParams::new(c, lambdas, &mut rng).unwrap();
        let pairs = [
            (cn.forward_train(&x, &ids).unwrap().0, cn.forward_train(&x2, &ids).unwrap().0),
            (cnx_forward(&x, &ids, &cnx).unwrap().0, cnx_forward(&x2, &ids, &cnx).unwrap().0),
        ];
        for (y, y2) in pairs {
            for s in (0..n).filter(|&s| ids[s] == 1) {
                prop_assert_eq!(sample(&y, s), sample(&y2, s));
            }
        }
    }

    #[test]
    fn standardized_groups_have_unit_moments(seed in any::<u64>(), scale in 0.5f64..20.0, k in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (n, c, l) = (4 * k, 3, 4);
        let x = normal(&[n, c, l], &mut rng).map(|v| scale * v + 3.0);
        let eps = 1e-12;

        let bn = BatchNorm { eps, ..BatchNorm::new(c) };
        let (_, cache) = bn.forward_train(&x).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|s| cache.xhat.data()[(s * c + ch) * l..(s * c + ch + 1) * l].to_vec()).collect();
            let (m, v) = group_stats(&vals);
            prop_assert!(m.abs() <= 1e-7 && (v - 1.0).abs() <= 1e-4, "bn channel {ch}: {m} {v}");
        }

        let (_, cache) = ln_forward(&x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), eps).unwrap();
        for s in 0..n {
            let (m, v) = group_stats(sample(&cache.xhat, s));
            prop_assert!(m.abs() <= 1e-7 && (v - 1.0).abs() <= 1e-4, "ln sample {s}: {m} {v}");
        }

        let ids = balanced_ids(n, k, &mut rng);
        let mut cn = ContextNorm::new(c, context_proportions(&ids, k).unwrap()).unwrap();
        cn.eps = eps;
        let (_, cache) = cn.forward_train(&x, &ids).unwrap();
        for ctx in 0..k {
            for ch in 0..c {
                let vals: Vec<f64> = (0..n)
                    .filter(|&s| ids[s] == ctx)
                    .flat_map(|s| cache.z.data()[(s * c + ch) * l..(s * c + ch + 1) * l].to_vec())
                    .collect();
                let (m, v) = group_stats(&vals);
                prop_assert!(m.abs() <= 1e-7 && (v - 1.0).abs() <= 1e-4, "cn context {ctx}: {m} {v}");
            }
        }
    }

    #[test]
    fn posterior_rows_sum_to_one(seed in any::<u64>(), far in 0.0f64..60.0) {
        let mut rng = Rng::new(seed);
        let (k, d) = (3, 4);
        let mut w: Vec<f64> = (0..k).map(|_| rng.uniform(0.1, 1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let gmm = GmmParams::new(
            Tensor::from_vec(&[k], w).unwrap(),
            normal(&[k, d], &mut rng),
            Tensor::create(&[k, d], Fill::Uniform { low: 0.5, high: 2.0 }, Some(&mut rng)).unwrap(),
        )
        .unwrap();
        // Push points `far` standard deviations away from every mean.
        let x = normal(&[10, d], &mut rng).map(|v| v + far * 1.5f64.sqrt() * 2.0);
        let p = posteriors(&x, &gmm).unwrap();
        for i in 0..10 {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12, "row {:?}", p.row(i));
            prop_assert!(p.row(i).iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn acn_weights_sum_to_exactly_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..9)) {
        let mut p = acn_init(logits.len(), 2, &mut Rng::new(0)).unwrap();
        p.logit_lambda = Tensor::from_vec(&[logits.len()], logits).unwrap();
        let lambdas = p.lambdas();
        prop_assert_eq!(lambdas.iter().sum::<f64>(), 1.0);
        prop_assert!(lambdas.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn em_loglik_never_decreases(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = normal(&[60, 2], &mut rng);
        let mut gmm = ctxnorm::gmm::em_fit(&x, 3, &mut rng, 1, 0.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..20 {
            let (next, ll) = em_step(&x, &gmm).unwrap();
            prop_assert!(ll >= prev - 1e-8, "{ll} < {prev}");
            prop_assert!(next.vars.data().iter().all(|&v| v >= VAR_FLOOR));
            prev = ll;
            gmm = next;
        }
    }

    #[test]
    fn kmeans_distortion_never_increases(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = normal(&[40, 3], &mut rng);
        let fit = kmeans_fit(&x, k, &mut rng, 50).unwrap();
        for pair in fit.distortion.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9);
        }
    }

    #[test]
    fn proportions_count_exactly(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let mut ids: Vec<usize> = (0..1000).map(|_| rng.below(k)).collect();
        ids[..k].iter_mut().enumerate().for_each(|(i, v)| *v = i);
        let lambdas = context_proportions(&ids, k).unwrap();
        for (ctx, &lam) in lambdas.iter().enumerate() {
            let count = ids.iter().filter(|&&i| i == ctx).count();
            prop_assert_eq!(lam, count as f64 / 1000.0);
        }
        prop_assert!((lambdas.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mode_gates_form_a_distribution(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut mn = ModeNorm::new(3, 4, &mut rng).unwrap();
        mn.gate_weight = normal(&[4, 3], &mut rng).map(|v| 5.0 * v);
        let x = normal(&[6, 3, 2], &mut rng).map(|v| 10.0 * v);
        let (_, cache) = mn.forward_train(&x).unwrap();
        for s in 0..6 {
            prop_assert!((cache.gates.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn variance_shortcut_agrees(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::create(&[5, 2, 3], Fill::Uniform { low: -10.0, high: 10.0 }, Some(&mut rng)).unwrap();
        let m = masked_moments(&x, &[true; 5]).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..5).flat_map(|s| x.data()[(s * 2 + ch) * 3..(s * 2 + ch + 1) * 3].to_vec()).collect();
            let ex2 = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            prop_assert!((ex2 - m.mean[ch] * m.mean[ch] - m.var[ch]).abs() <= 1e-10);
        }
    }

    #[test]
    fn cubic_gradients_are_exact(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let f = |t: &Tensor| {
            let (u, v) = (t.data()[0], t.data()[1]);
            Ok(a * u * u * u + b * u * v * v + c * v)
        };
        let x = Tensor::from_vec(&[2], vec![x0, x1]).unwrap();
        let g = finite_diff_grad(f, &x, 1e-5).unwrap();
        let want = [3.0 * a * x0 * x0 + b * x1 * x1, 2.0 * b * x0 * x1 + c];
        for (got, w) in g.data().iter().zip(want) {
            prop_assert!((got - w).abs() <= 1e-5 * w.abs().max(1.0));
        }
    }
}

#[test]
fn masked_all_true_matches_batch_norm_moments() {
    let mut rng = Rng::new(0);
    let x = normal(&[5, 3, 4], &mut rng);
    let m = masked_moments(&x, &[true; 5]).unwrap();
    let (_, cache) = BatchNorm::new(3).forward_train(&x).unwrap();
    assert_eq!(m.mean, cache.mean);
    assert_eq!(m.var, cache.var);
}
