use super::*;
use crate::distributions::{
    kl_diag, log_likelihood, log_prob_diag, reparam_sample, DiagGaussian, LikelihoodFamily,
};
use crate::models::{LatentChain, ModelConfig};
use crate::objectives::sample_eps;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_config(z_dims: Vec<usize>) -> ModelConfig {
    ModelConfig {
        z_dims,
        beta: 1.0,
        likelihood: LikelihoodFamily::BernoulliLogits,
        fixed_sigma: 1.0,
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        link_hidden: vec![4, 3, 3],
        leaky_slope: 0.2,
        batch_norm: false,
        free_bits: 0.0,
        data_dim: 6,
        dataset_size: 20,
        dlgm: false,
    }
}

fn batch(rng: &mut impl Rng, m: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, d), || rng.random_range(-1.0..1.0))
}

fn setup(z_dims: Vec<usize>, m: usize, seed: u64) -> (Model, Array2<f64>, Vec<Array2<f64>>, MinibatchContext) {
    let model = Model::new(tiny_config(z_dims.clone()), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = batch(&mut rng, m, 6);
    let eps = sample_eps(&mut rng, m, &z_dims);
    let ctx = MinibatchContext::new(m, 20).unwrap();
    (model, x, eps, ctx)
}

fn zero_param(model: &mut Model, name: &str) {
    let id = model.params.id(name).unwrap();
    model.params.get_mut(id).fill(0.0);
}

#[test]
fn max_entropy_decoder_and_prior_encoder_give_minus_d_log_two() {
    let (mut model, x, eps, _) = setup(vec![3], 7, 1);
    for name in ["enc.l1.w", "enc.l1.b", "dec.l1.w", "dec.l1.b"] {
        zero_param(&mut model, name);
    }
    let r = elbo_vanilla(&model, &x, &eps).unwrap();
    assert_eq!(r.total, -6.0 * 2f64.ln());
    assert_eq!(r.kl_terms, vec![0.0]);
}

#[test]
fn beta_one_total_correlation_elbo_equals_vanilla() {
    let (model, x, eps, ctx) = setup(vec![3], 8, 2);
    let a = elbo_vanilla(&model, &x, &eps).unwrap();
    let b = beta_tc_elbo(&model, &x, 1.0, &ctx, &eps).unwrap();
    assert!((a.total - b.total).abs() < 1e-8);
    let c = beta_tc_elbo(&model, &x, 5.0, &ctx, &eps).unwrap();
    assert!((c.total - (a.total - 4.0 * c.tc_estimate)).abs() < 1e-10);
}

#[test]
fn single_layer_seatbelt_reduces_to_beta_tc() {
    let (model, x, eps, ctx) = setup(vec![3], 8, 3);
    for beta in [1.0, 2.5, 8.0] {
        let a = beta_tc_elbo(&model, &x, beta, &ctx, &eps).unwrap();
        let b = seatbelt_elbo(&model, &x, beta, &ctx, &eps).unwrap();
        assert!((a.total - b.total).abs() < 1e-8);
    }
}

/// Per-row `log p(x, z) - log q(z | x)` by replaying the chain with the
/// value-level model API.
fn replayed_hierarchical_elbo(model: &Model, x: &Array2<f64>, eps: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    for r in 0..x.nrows() {
        let xr = x.row(r).to_vec();
        let er: Vec<Vec<f64>> = eps.iter().map(|e| e.row(r).to_vec()).collect();
        let chain = model.infer_chain(&xr, &er).unwrap();
        let log_q: f64 = chain
            .posteriors
            .iter()
            .zip(&chain.samples)
            .map(|(p, z)| log_prob_diag(p, z).unwrap())
            .sum();
        total += model.generative_logjoint(&xr, &chain).unwrap() - log_q;
    }
    total / x.nrows() as f64
}

#[test]
fn beta_one_seatbelt_is_the_hierarchical_elbo() {
    for z in [vec![3], vec![3, 2], vec![4, 3, 2]] {
        let (model, x, eps, ctx) = setup(z, 6, 4);
        let r = seatbelt_elbo(&model, &x, 1.0, &ctx, &eps).unwrap();
        let oracle = replayed_hierarchical_elbo(&model, &x, &eps);
        assert!((r.total - oracle).abs() < 1e-9, "{} vs {oracle}", r.total);
    }
}

#[test]
fn compact_and_decomposed_seatbelt_agree() {
    for (z, seed) in [(vec![3, 2], 5), (vec![4, 3, 2], 6)] {
        let (model, x, eps, ctx) = setup(z, 9, seed);
        for beta in [1.0, 3.0, 10.0] {
            let a = seatbelt_elbo(&model, &x, beta, &ctx, &eps).unwrap();
            let b = seatbelt_elbo_decomposed(&model, &x, beta, &ctx, &eps).unwrap();
            assert!((a.total - b.total).abs() < 1e-8, "{} vs {}", a.total, b.total);
            assert!((b.total - b.decomposed_total(beta)).abs() < 1e-10);
        }
    }
}

#[test]
fn decomposed_form_rejects_single_layer_models() {
    let (model, x, eps, ctx) = setup(vec![3], 4, 7);
    assert!(seatbelt_elbo_decomposed(&model, &x, 2.0, &ctx, &eps).is_err());
}

#[test]
fn single_datapoint_mutual_information_is_the_unrolled_definition() {
    // one datapoint, so the aggregate over the batch is that point's
    // top-layer conditional evaluated at its own sample
    let (mut model, x, eps, _) = setup(vec![3, 2], 1, 8);
    model.config.dataset_size = 1;
    let ctx = MinibatchContext::new(1, 1).unwrap();
    let r = seatbelt_elbo_decomposed(&model, &x, 2.0, &ctx, &eps).unwrap();
    let er: Vec<Vec<f64>> = eps.iter().map(|e| e.row(0).to_vec()).collect();
    let chain = model.infer_chain(&x.row(0).to_vec(), &er).unwrap();
    let log_q = log_prob_diag(&chain.posteriors[1], &chain.samples[1]).unwrap();
    let est = mws_log_q_aggregate(&[chain.samples[1].clone()], &[chain.posteriors[1].clone()], &ctx).unwrap();
    assert!((r.mi_estimate - (log_q - est.joint[0])).abs() < 1e-12);
    assert!(r.mi_estimate.abs() < 1e-12);
    assert_eq!(r.tc_estimate, 0.0);
}

#[test]
fn objective_reports_per_layer_terms() {
    let (model, x, eps, ctx) = setup(vec![4, 3, 2], 5, 9);
    let r = seatbelt_elbo(&model, &x, 4.0, &ctx, &eps).unwrap();
    assert_eq!(r.kl_terms.len(), 3);
    let sum: f64 = r.kl_terms.iter().sum();
    assert!((r.total - (r.reconstruction - sum - 3.0 * r.tc_estimate)).abs() < 1e-10);
}

#[test]
fn free_bits_floor() {
    assert_eq!(free_bits_apply(&[0.1, 2.0], 0.0).unwrap(), vec![0.1, 2.0]);
    assert_eq!(free_bits_apply(&[0.01, 0.02], 0.5).unwrap(), vec![0.5, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = free_bits_apply(&v, 0.25).unwrap();
    for (a, b) in v.iter().zip(&out) {
        assert_eq!(*b, if *a > 0.25 { *a } else { 0.25 });
    }
    assert!(free_bits_apply(&v, -0.1).is_err());
}

#[test]
fn free_bits_with_zero_threshold_is_identity_and_floors_otherwise() {
    let (mut model, x, eps, ctx) = setup(vec![3], 6, 10);
    let plain = beta_tc_elbo(&model, &x, 2.0, &ctx, &eps).unwrap();
    model.config.free_bits = 1e6;
    let floored = beta_tc_elbo(&model, &x, 2.0, &ctx, &eps).unwrap();
    let expected = plain.reconstruction - 3.0 * 1e6 - plain.tc_estimate;
    assert!((floored.total - expected).abs() < 1e-6);
    // the raw KL is still reported
    assert_eq!(plain.kl_terms, floored.kl_terms);
}

#[test]
fn free_bits_below_threshold_gives_zero_encoder_gradient_from_the_kl() {
    let (mut model, x, eps, _) = setup(vec![3], 6, 11);
    model.config.free_bits = 1e6;
    let spec = ObjectiveSpec::new(ObjectiveKind::Vanilla, 1.0, 1e6);
    let with_floor = objective_with_grads(&model, &spec, &x, &eps, false).unwrap();
    // with every KL floored only the reconstruction term drives gradients
    let mut g = model.graph(true, false);
    let xv = g.tape.constant(x.clone());
    let chain = model.chain_vars(&mut g, xv, Some(&eps)).unwrap();
    let samples: Vec<_> = chain.iter().map(|l| l.sample).collect();
    let ll = model.log_likelihood_rows(&mut g, xv, &samples).unwrap();
    let recon = g.tape.mean(ll);
    let grads = g.tape.backward(recon);
    let recon_grads = g.param_grads(&grads, &model.params);
    for (a, b) in with_floor.grads.iter().zip(&recon_grads) {
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

fn fd_check(model: &Model, spec: &ObjectiveSpec, x: &Array2<f64>, eps: &[Array2<f64>]) {
    assert!(model.params.num_trainable() <= 500);
    let analytic = objective_with_grads(model, spec, x, eps, false).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for id in 0..model.params.len() {
        if !model.params.is_trainable(id) {
            continue;
        }
        let n = model.params.get(id).len();
        for k in 0..n {
            let orig = *model.params.get(id).iter().nth(k).unwrap();
            *probe.params.get_mut(id).iter_mut().nth(k).unwrap() = orig + h;
            let up = evaluate(&probe, spec, x, eps).unwrap().total;
            *probe.params.get_mut(id).iter_mut().nth(k).unwrap() = orig - h;
            let down = evaluate(&probe, spec, x, eps).unwrap().total;
            *probe.params.get_mut(id).iter_mut().nth(k).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = *analytic.grads[id].iter().nth(k).unwrap();
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "{:?}: worst relative error {worst}", spec.kind);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let (model, x, eps, _) = setup(vec![3], 5, 12);
    fd_check(&model, &ObjectiveSpec::new(ObjectiveKind::Vanilla, 1.0, 0.0), &x, &eps);
    fd_check(&model, &ObjectiveSpec::new(ObjectiveKind::BetaTc, 4.0, 0.0), &x, &eps);
    let (model, x, eps, _) = setup(vec![3, 2], 5, 13);
    fd_check(&model, &ObjectiveSpec::new(ObjectiveKind::Seatbelt, 6.0, 0.0), &x, &eps);
    let decomposed = ObjectiveSpec {
        decomposed: true,
        ..ObjectiveSpec::new(ObjectiveKind::Seatbelt, 6.0, 0.0)
    };
    fd_check(&model, &decomposed, &x, &eps);
}

#[test]
fn mws_matches_direct_density_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let conds: Vec<DiagGaussian> = (0..4)
        .map(|_| DiagGaussian::new(vec![rng.random_range(-2.0..2.0)], vec![rng.random_range(-1.0..0.5)]).unwrap())
        .collect();
    let zs: Vec<Vec<f64>> = conds
        .iter()
        .map(|c| reparam_sample(c, &[rng.sample(StandardNormal)]).unwrap())
        .collect();
    let ctx = MinibatchContext::new(4, 4).unwrap();
    let est = mws_log_q_aggregate(&zs, &conds, &ctx).unwrap();
    for (k, z) in zs.iter().enumerate() {
        let direct: f64 = conds
            .iter()
            .map(|c| {
                let s2 = c.log_var[0].exp();
                (-(z[0] - c.mean[0]).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
            })
            .sum::<f64>();
        let oracle = (direct / 16.0).ln();
        assert!((est.joint[k] - oracle).abs() < 1e-10);
        assert!((est.per_dim[k][0] - oracle).abs() < 1e-10);
    }
}

/// Simpson-rule `E_{q(z)} log q(z)` for a 1-D Gaussian mixture.
fn mixture_neg_entropy(conds: &[DiagGaussian]) -> f64 {
    let dens = |z: f64| {
        conds
            .iter()
            .map(|c| (log_prob_diag(c, &[z]).unwrap()).exp())
            .sum::<f64>()
            / conds.len() as f64
    };
    let (lo, hi, n) = (-15.0, 15.0, 60_000);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let z = lo + h * i as f64;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let p = dens(z);
        if p > 0.0 {
            acc += w * p * p.ln();
        }
    }
    acc * h / 3.0
}

#[test]
fn mws_bias_on_a_tiny_dataset_is_negative() {
    // N = M = 4: every batch is the full dataset, and the estimator sees
    // log q(z) - log M. The mean estimate over many draws therefore sits
    // below the quadrature value of E log q(z).
    let conds: Vec<DiagGaussian> = [-1.5, -0.2, 0.4, 2.0]
        .iter()
        .zip([-0.5, 0.0, -1.0, 0.3])
        .map(|(m, lv)| DiagGaussian::new(vec![*m], vec![lv]).unwrap())
        .collect();
    let exact = mixture_neg_entropy(&conds);
    let ctx = MinibatchContext::new(4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let draws = 20_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let zs: Vec<Vec<f64>> = conds
            .iter()
            .map(|c| reparam_sample(c, &[rng.sample(StandardNormal)]).unwrap())
            .collect();
        let est = mws_log_q_aggregate(&zs, &conds, &ctx).unwrap();
        acc += est.joint.iter().sum::<f64>() / 4.0;
    }
    let bias = acc / draws as f64 - exact;
    assert!((bias + 4f64.ln()).abs() < 0.05, "bias {bias}");
}

/// Linear encoder whose aggregate posterior is `N(0, [[1, rho], [rho, 1]])`.
/// The estimator's `-log(NM)` normalisation enters the joint once and each
/// marginal once, so the raw estimate carries an extra `(D - 1) log N`; that
/// constant is removed before comparing with the mutual information.
pub(crate) fn correlated_gaussian_tc(rho: f64, m: usize, seed: u64) -> f64 {
    let s2: f64 = 0.1;
    let c = 1.0 - s2;
    // A A^T = [[c, rho], [rho, c]] with A symmetric
    let a = ((c + rho).sqrt() + (c - rho).sqrt()) / 2.0;
    let b = ((c + rho).sqrt() - (c - rho).sqrt()) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conds = Vec::with_capacity(m);
    let mut zs = Vec::with_capacity(m);
    for _ in 0..m {
        let x0: f64 = rng.sample(StandardNormal);
        let x1: f64 = rng.sample(StandardNormal);
        let q = DiagGaussian::new(vec![a * x0 + b * x1, b * x0 + a * x1], vec![s2.ln(); 2]).unwrap();
        let e = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        zs.push(reparam_sample(&q, &e).unwrap());
        conds.push(q);
    }
    let ctx = MinibatchContext::new(m, m).unwrap();
    mws_log_q_aggregate(&zs, &conds, &ctx).unwrap().total_correlation() - (m as f64).ln()
}

#[test]
fn correlated_aggregate_total_correlation_matches_closed_form() {
    let target = -0.5 * (1.0f64 - 0.64).ln();
    let tc = correlated_gaussian_tc(0.8, 1024, 16);
    assert!((tc - target).abs() < 0.1 * target, "{tc} vs {target}");
}

#[test]
fn factorised_single_point_aggregate_has_no_total_correlation() {
    let q = DiagGaussian::new(vec![0.3, -0.7, 1.1], vec![-0.2, 0.4, 0.0]).unwrap();
    let ctx = MinibatchContext::new(1, 1).unwrap();
    let z = reparam_sample(&q, &[0.5, -1.2, 0.3]).unwrap();
    let est = mws_log_q_aggregate(&[z], &[q], &ctx).unwrap();
    assert!(est.total_correlation().abs() < 1e-12);
}

#[test]
fn elbo_matches_quadrature_on_a_one_dimensional_latent() {
    let mut cfg = tiny_config(vec![1]);
    cfg.likelihood = LikelihoodFamily::GaussianFixedVariance;
    cfg.fixed_sigma = 0.7;
    cfg.dataset_size = 40_000;
    let model = Model::new(cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = model.encode(&x).unwrap();

    // E_q log p(x | z) by Simpson's rule, closed-form KL to the prior
    let (mu, sd) = (q.mean[0], (0.5 * q.log_var[0]).exp());
    let n = 2000;
    let (lo, hi) = (mu - 10.0 * sd, mu + 10.0 * sd);
    let h = (hi - lo) / n as f64;
    let mut recon = 0.0;
    for i in 0..=n {
        let z = lo + h * i as f64;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let dens = log_prob_diag(&q, &[z]).unwrap().exp();
        let lp = model.likelihood_params(&[vec![z]]).unwrap();
        recon += w * dens * log_likelihood(&lp, &x).unwrap();
    }
    recon *= h / 3.0;
    let oracle = recon - kl_diag(&q, &DiagGaussian::standard(1)).unwrap();

    let (chunks, rows) = (20, 2000);
    let m = chunks * rows;
    let xs = Array2::from_shape_fn((rows, 6), |(_, j)| x[j]);
    let eps = sample_eps(&mut rng, m, &[1]);
    let spec = ObjectiveSpec::new(ObjectiveKind::Vanilla, 1.0, 0.0);
    let mut total = 0.0;
    for c in 0..chunks {
        let e = eps[0].slice(ndarray::s![c * rows..(c + 1) * rows, ..]).to_owned();
        total += evaluate(&model, &spec, &xs, &[e]).unwrap().total / chunks as f64;
    }
    // per-row terms for the standard error
    let mut per_row = Vec::with_capacity(m);
    for r in 0..m {
        let z = reparam_sample(&q, &[eps[0][[r, 0]]]).unwrap();
        let chain = LatentChain {
            posteriors: vec![q.clone()],
            samples: vec![z.clone()],
        };
        per_row.push(model.generative_logjoint(&x, &chain).unwrap() - log_prob_diag(&q, &z).unwrap());
    }
    let mean = per_row.iter().sum::<f64>() / m as f64;
    let var = per_row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let se = (var / m as f64).sqrt();
    assert!((total - mean).abs() < 1e-9);
    assert!((total - oracle).abs() < 4.0 * se, "{total} vs {oracle} (se {se})");
}

#[test]
fn top_layer_split_matches_the_analytic_top_kl() {
    // -(T_a + T_b + T_c) over 10^4 samples against the mean closed-form
    // KL(q(z^L | z^{L-1}) || N(0, I)) at the sampled z^{L-1}
    let (chunks, rows) = (50, 200);
    let mut cfg = tiny_config(vec![3, 2]);
    cfg.dataset_size = rows;
    let model = Model::new(cfg, 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let ctx = MinibatchContext::new(rows, rows).unwrap();
    let mut diffs = Vec::with_capacity(chunks);
    for _ in 0..chunks {
        let x = batch(&mut rng, rows, 6);
        let eps = sample_eps(&mut rng, rows, &[3, 2]);
        let r = seatbelt_elbo_decomposed(&model, &x, 1.0, &ctx, &eps).unwrap();
        let split = r.mi_estimate + r.tc_estimate + r.dimwise_kl;
        let mut analytic = 0.0;
        for k in 0..rows {
            let er: Vec<Vec<f64>> = eps.iter().map(|e| e.row(k).to_vec()).collect();
            let chain = model.infer_chain(&x.row(k).to_vec(), &er).unwrap();
            analytic += kl_diag(&chain.posteriors[1], &DiagGaussian::standard(2)).unwrap();
        }
        diffs.push(split - analytic / rows as f64);
    }
    let mean = diffs.iter().sum::<f64>() / chunks as f64;
    let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chunks - 1) as f64;
    let se = (var / chunks as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean difference {mean} (se {se})");
}
