use dlfm::baselines::{bayesian_linear_regression, ExactGp};
use dlfm::numerics::{softplus_inv, Cholesky, Matrix, RngKey, RngStream};
use dlfm::rff::{FeatureKind, ForwardMode, FrequencyMode, RffConfig, RffModel};
use dlfm::vip::{draw_pathwise_state, LatentKernel, VipConfig, VipModel};

fn rff(kind: FeatureKind, hidden: Vec<usize>) -> RffModel {
    let mut cfg = RffConfig::new(kind, 1, 1, hidden);
    cfg.n_rf = 10;
    cfg.n_mc = 4;
    cfg.init.lengthscale = 0.8;
    cfg.init.decay = 0.5;
    cfg.init.scale = 0.2;
    RffModel::new(&cfg, 21).unwrap()
}

/// Posterior scales of about 4e-18: numerically degenerate, finite KL.
fn collapse(model: &mut RffModel) {
    for l in &mut model.layers {
        for h in &mut l.heads {
            h.weight_scale.iter_mut().for_each(|s| *s = -40.0);
            h.freq_scale.iter_mut().for_each(|s| *s = -40.0);
        }
    }
}

#[test]
fn zero_posterior_scales_leave_only_noise_variance() {
    let mut m = rff(FeatureKind::Ode1, vec![2]);
    collapse(&mut m);
    let x = Matrix::column(&[0.1, 0.7, 1.9]);
    let noise = m.likelihood_var.value();
    let p = m.predict(&x, 20, ForwardMode::TestSampleWeights, RngKey::new(0, 0)).unwrap();
    for i in 0..3 {
        assert!((p.var[(i, 0)] - noise).abs() < 1e-12);
    }
    let m = rff(FeatureKind::Ode1, vec![2]);
    let p = m.predict(&x, 1, ForwardMode::TestSampleWeights, RngKey::new(0, 0)).unwrap();
    for i in 0..3 {
        assert_eq!(p.var[(i, 0)], noise);
    }
}

#[test]
fn predictive_moments_are_stable_across_seeds() {
    let m = rff(FeatureKind::Ode1, vec![2]);
    let x = Matrix::column(&[0.9]);
    let a = m.predict(&x, 10_000, ForwardMode::TestSampleWeights, RngKey::new(1, 0)).unwrap();
    let b = m.predict(&x, 10_000, ForwardMode::TestSampleWeights, RngKey::new(2, 0)).unwrap();
    let (ma, mb) = (a.mean[(0, 0)], b.mean[(0, 0)]);
    let (va, vb) = (a.var[(0, 0)], b.var[(0, 0)]);
    // Means near zero are compared against the predictive scale.
    assert!((ma - mb).abs() < 0.02 * va.sqrt().max(ma.abs()), "{ma} vs {mb}");
    assert!((va - vb).abs() < 0.02 * va, "{va} vs {vb}");
}

#[test]
fn perfect_single_point_has_zero_likelihood_term() {
    let mut m = rff(FeatureKind::Ode1, vec![]);
    collapse(&mut m);
    m.likelihood_var.set_value(1.0 / (2.0 * std::f64::consts::PI));
    let x = Matrix::column(&[0.4]);
    let f = m.sample(&x, ForwardMode::TestMeanWeights, 0, RngKey::new(0, 0)).unwrap();
    let t = m
        .elbo_terms(&x, &f, None, 1, 3, ForwardMode::TrainLocalReparam, RngKey::new(0, 0))
        .unwrap();
    assert!(t.expected_log_lik.abs() < 1e-12, "{}", t.expected_log_lik);
}

#[test]
fn single_layer_fixed_frequency_mean_is_linear_regression() {
    let mut cfg = RffConfig::new(FeatureKind::Eq, 1, 1, vec![]);
    cfg.n_rf = 6;
    cfg.frequency_mode = FrequencyMode::Fixed;
    cfg.init.lengthscale = 0.7;
    let mut m = RffModel::new(&cfg, 3).unwrap();
    let mut r = RngStream::new(4, 0);
    let x = Matrix::from_fn(25, 1, |_, _| r.uniform_range(-2.0, 2.0));
    let y: Vec<f64> = (0..25).map(|i| (1.5 * x[(i, 0)]).sin() + 0.1 * r.normal()).collect();
    let noise = m.likelihood_var.value();
    let layer = &m.layers[0];
    let phi = layer.features(0, &x, &layer.sample_frequencies(0, 0)).unwrap();
    let blr = bayesian_linear_regression(&phi, &y, noise).unwrap();
    m.layers[0].heads[0].weight_mean = blr.mean.clone();
    let xs = Matrix::column(&[-1.3, 0.0, 0.45, 1.7]);
    let p = m.predict(&xs, 1, ForwardMode::TestMeanWeights, RngKey::new(0, 0)).unwrap();
    let layer = &m.layers[0];
    let phis = layer.features(0, &xs, &layer.sample_frequencies(0, 0)).unwrap();
    for i in 0..4 {
        let want: f64 = (0..phis.cols()).map(|k| phis[(i, k)] * blr.mean[k]).sum();
        assert!((p.mean[(i, 0)] - want).abs() < 1e-6, "{} vs {want}", p.mean[(i, 0)]);
    }
}

#[test]
fn kl_vanishes_at_the_prior_for_both_families() {
    for kind in [FeatureKind::Ode1, FeatureKind::Eq] {
        let mut m = rff(kind, vec![2]);
        for l in &mut m.layers {
            for h in &mut l.heads {
                h.weight_mean.iter_mut().for_each(|v| *v = 0.0);
                h.weight_scale.iter_mut().for_each(|v| *v = softplus_inv(1.0));
            }
            l.frequency_mode = FrequencyMode::Fixed;
        }
        let (kw, kf) = m.kl().unwrap();
        assert!(kw.abs() < 1e-12 && kf == 0.0, "{kind:?}: {kw} {kf}");
    }
}

#[test]
fn prior_matched_states_reproduce_gram() {
    let z = Matrix::column(&[-0.6, -0.1, 0.3, 0.9]);
    let kernel = LatentKernel {
        variance: 1.4,
        lengthscale: vec![0.5],
    };
    let k = kernel.gram(&z);
    let chol = Cholesky::factor(&k, 1e-9).unwrap().factor_matrix().clone();
    let mut r = RngStream::new(17, 0);
    let n = 10_000;
    let mut acc = Matrix::zeros(4, 4);
    for _ in 0..n {
        let s = draw_pathwise_state(&z, &[0.0; 4], &chol, &kernel, 16, 1e-9, &mut r).unwrap();
        let u: Vec<f64> = (0..4).map(|i| dlfm::vip::latent_eval(&s, &kernel, &z, z.row(i))).collect();
        for i in 0..4 {
            for j in 0..4 {
                acc[(i, j)] += u[i] * u[j] / n as f64;
            }
        }
    }
    let err = acc.max_abs_diff(&k);
    let rel = Matrix::from_fn(4, 4, |i, j| acc[(i, j)] - k[(i, j)]).frobenius() / k.frobenius();
    assert!(rel < 0.05, "relative Frobenius error {rel} (max abs {err})");
}

#[test]
fn latent_sample_matches_direct_evaluation() {
    let mut r = RngStream::new(2, 9);
    let z = Matrix::from_fn(6, 2, |_, _| r.uniform_range(-1.0, 1.0));
    let kernel = LatentKernel {
        variance: 0.8,
        lengthscale: vec![0.4, 0.9],
    };
    let chol = Matrix::from_fn(6, 6, |i, j| if i == j { 0.2 } else { 0.0 });
    let s = draw_pathwise_state(&z, &r.normals(6), &chol, &kernel, 12, 1e-6, &mut r).unwrap();
    for _ in 0..50 {
        let x = [r.uniform_range(-2.0, 2.0), r.uniform_range(-2.0, 2.0)];
        let mut prior = 0.0;
        for i in 0..12 {
            let arg = s.theta[(i, 0)] * x[0] + s.theta[(i, 1)] * x[1] + s.beta[i];
            prior += s.w[i] * arg.cos();
        }
        prior *= (2.0f64 / 12.0).sqrt();
        let mut update = 0.0;
        for j in 0..6 {
            let d0 = (x[0] - z[(j, 0)]) / 0.4;
            let d1 = (x[1] - z[(j, 1)]) / 0.9;
            update += s.q[j] * 0.8 * (-0.5 * (d0 * d0 + d1 * d1)).exp();
        }
        let got = dlfm::vip::latent_eval(&s, &kernel, &z, &x);
        assert!((got - prior - update).abs() < 1e-12);
    }
}

#[test]
fn inducing_bound_reaches_exact_marginal_in_the_sharp_filter_limit() {
    // With a very fast decay and matching amplitude the filtered output is
    // the latent itself; with Z = X and q set to the exact posterior the
    // bound equals the GP log marginal.
    let n = 10;
    let mut r = RngStream::new(5, 5);
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / 2.0 + 0.1 * r.uniform()).collect();
    let x = Matrix::column(&xs);
    let y = Matrix::from_fn(n, 1, |i, _| xs[i].sin() + 0.2 * r.normal());
    let (var, ls, noise, gamma) = (1.2, 0.6, 0.1, 5000.0);
    let mut cfg = VipConfig::new(1, 1, vec![]);
    cfg.n_inducing = n;
    cfg.n_basis = 32;
    let mut m = VipModel::new(&cfg, &x, 0).unwrap();
    m.likelihood_var.set_value(noise);
    // The default jitter would shift the prior away from the exact GP.
    m.jitter = 1e-12;
    let layer = &mut m.layers[0];
    layer.inducing = x.clone();
    layer.variance.set_value(var);
    layer.lengthscale[0].set_value(ls);
    layer.decay[0].set_value(gamma);
    layer.amplitude = vec![gamma];
    let kernel = layer.kernel();
    let k = kernel.gram(&x);
    let mut kn = k.clone();
    for i in 0..n {
        kn[(i, i)] += noise;
    }
    let kn = Cholesky::factor(&kn, 0.0).unwrap();
    let yv = y.col_to_vec(0);
    let alpha = kn.solve_vec(&yv);
    let mean: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[(i, j)] * alpha[j]).sum()).collect();
    let kinv_k = kn.solve(&k).unwrap();
    let post = Matrix::from_fn(n, n, |i, j| k[(i, j)] - (0..n).map(|l| k[(i, l)] * kinv_k[(l, j)]).sum::<f64>());
    let lpost = Cholesky::factor(&post, 1e-10).unwrap().factor_matrix().clone();
    layer.q_mean[0] = mean;
    for i in 0..n {
        for j in 0..=i {
            layer.q_chol[0][i * n + j] = if i == j { softplus_inv(lpost[(i, i)]) } else { lpost[(i, j)] };
        }
    }
    let gp = ExactGp::new(x.clone(), yv, var, ls, noise).unwrap();
    let (lml, _) = gp.log_marginal().unwrap();
    let elbo = m.elbo_terms(&x, &y, None, n, 4000, RngKey::new(1, 0)).unwrap().elbo();
    assert!((elbo - lml).abs() < 0.05, "bound {elbo} vs log marginal {lml}");
    assert!(elbo < lml + 0.05);
}
