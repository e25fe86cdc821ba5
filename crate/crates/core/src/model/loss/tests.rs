use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckConfig};
use crate::model::{Architecture, LOGVAR_MAX, LOGVAR_MIN};
use crate::transforms::TransformPrior;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_arch(in_channels: usize) -> Architecture {
    Architecture {
        in_channels,
        widths: [3, 4, 4, 3],
    }
}

fn nll_oracle(t: &[f64], d: &[f64], lv: &[f64], dim: usize) -> f64 {
    let n = t.len() / dim;
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..dim {
            let k = i * dim + j;
            let var = lv[k].exp();
            row += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * (t[k] - d[k]).powi(2) / var;
        }
        total += row;
    }
    total / n as f64
}

fn nll_of(t: &[f64], d: &[f64], lv: &[f64], dim: usize) -> f64 {
    let n = t.len() / dim;
    let mut g = Graph::<f64>::new();
    let tv = g.constant(Tensor::new([n, dim], t.to_vec()).unwrap());
    let dv = g.constant(Tensor::new([n, dim], d.to_vec()).unwrap());
    let lvv = g.constant(Tensor::new([n, dim], lv.to_vec()).unwrap());
    let l = gaussian_nll(&mut g, tv, dv, lvv).unwrap();
    g.value(l).item()
}

#[test]
fn nll_zero_residual_unit_variance() {
    let t = vec![0.3; 8];
    let v = nll_of(&t, &t, &[0.0; 8], 8);
    assert!((v - 4.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    assert!((v - 7.35151).abs() < 1e-5);
}

#[test]
fn nll_single_dim_closed_form() {
    let v = nll_of(&[1.0], &[0.0], &[0.0], 1);
    assert!((v - 1.41894).abs() < 1e-5);
    assert!((v - (0.5 * LOG_2PI + 0.5)).abs() < 1e-15);
}

#[test]
fn nll_matches_scalar_oracle() {
    let mut r = rng(4);
    let t = Tensor::<f64>::randn([6, 8], 1.0, &mut r);
    let d = Tensor::<f64>::randn([6, 8], 1.0, &mut r);
    let lv = Tensor::<f64>::uniform([6, 8], -3.0, 3.0, &mut r);
    let oracle = nll_oracle(t.data(), d.data(), lv.data(), 8);
    assert!((nll_of(t.data(), d.data(), lv.data(), 8) - oracle).abs() < 1e-12);
    assert!((gaussian_nll_value(t.data(), d.data(), lv.data(), 8) - oracle).abs() < 1e-12);
}

#[test]
fn reparameterize_degenerate_cases() {
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let lv = g.constant(Tensor::new([3], vec![0.7, -1.0, 3.0]).unwrap());
    let zero = g.constant(Tensor::zeros([3]));
    let z = reparameterize(&mut g, mean, lv, zero).unwrap();
    assert_eq!(g.value(z).data(), &[1.0, -2.0, 0.5]);
    let lv0 = g.constant(Tensor::zeros([3]));
    let e = g.constant(Tensor::new([3], vec![0.25, 0.5, -1.0]).unwrap());
    let z = reparameterize(&mut g, mean, lv0, e).unwrap();
    assert_eq!(g.value(z).data(), &[1.25, -1.5, -0.5]);
}

#[test]
fn reparameterize_moments() {
    let n = 100_000;
    let (mu, lv) = (0.7, -0.4f64);
    let mut r = rng(8);
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Tensor::full([n], mu));
    let logvar = g.constant(Tensor::full([n], lv));
    let eps = g.constant(Tensor::randn([n], 1.0, &mut r));
    let z = reparameterize(&mut g, mean, logvar, eps).unwrap();
    let s = g.value(z).data();
    let m = s.iter().sum::<f64>() / n as f64;
    let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let var = lv.exp();
    assert!((m - mu).abs() < 3.0 * (var / n as f64).sqrt(), "mean {m}");
    // Standard error of a Gaussian sample variance is var·sqrt(2/(n−1)).
    assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt(), "var {v}");
}

#[test]
fn encoder_shape_contract() {
    let model = Model::<f32>::new(Architecture::default(), &mut rng(1)).unwrap();
    let x = Tensor::<f32>::randn([8, 3, 32, 32], 1.0, &mut rng(2));
    let (mean, lv) = model.encode_frozen(&x).unwrap();
    assert_eq!(mean.shape(), &[8, 96, 8, 8]);
    assert_eq!(lv.shape(), &[8, 96, 8, 8]);
    assert_eq!(Architecture::default().latent_shape(32, 32), [96, 8, 8]);
    assert_eq!(Architecture::default().feature_dim(), 192);

    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let mut bn = model.bn_stats.clone();
    let z = g.constant(mean.clone());
    let zt = g.constant(mean);
    let (d, lv) = model.decode(&mut g, &p, &mut bn, z, zt, BnMode::Eval).unwrap();
    assert_eq!(g.shape(d), &[8, 8]);
    assert_eq!(g.shape(lv), &[8, 8]);
}

#[test]
fn eval_mode_is_deterministic_and_clamped() {
    let model = Model::<f64>::new(tiny_arch(1), &mut rng(3)).unwrap();
    let x = Tensor::<f64>::randn([2, 1, 12, 12], 1.0, &mut rng(4));
    let a = model.encode_frozen(&x).unwrap();
    let b = model.encode_frozen(&x).unwrap();
    assert_eq!(a, b);
    assert!(a.1.data().iter().all(|&v| (LOGVAR_MIN..=LOGVAR_MAX).contains(&v)));

    // A head that would produce huge log-variances is clamped before use.
    let mut hot = model.clone();
    let head = hot.param_index("enc.logvar.bn.beta").unwrap();
    hot.params[head].value = Tensor::full([4], 50.0);
    let (_, lv) = hot.encode_frozen(&x).unwrap();
    assert!(lv.data().iter().all(|&v| v == LOGVAR_MAX));
}

#[test]
fn siamese_branches_share_weights() {
    let mut model = Model::<f64>::new(tiny_arch(1), &mut rng(5)).unwrap();
    let img = Tensor::<f64>::randn([1, 1, 12, 12], 1.0, &mut rng(6));
    let run = |model: &Model<f64>| {
        let inputs = StepInputs {
            original: img.clone(),
            transformed: img.clone(),
            targets: Tensor::zeros([1, 8]),
            eps: None,
            eps_tilde: None,
            homographies: vec![Homography::IDENTITY],
        };
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let mut bn = model.bn_stats.clone();
        let o = g.constant(inputs.original.clone());
        let t = g.constant(inputs.transformed.clone());
        let x = g.concat_rows(o, t).unwrap();
        let enc = model.encode(&mut g, &p, &mut bn, x, BnMode::Train, false).unwrap();
        let m = g.value(enc.mean).clone();
        let half = m.numel() / 2;
        (m.data()[..half].to_vec(), m.data()[half..].to_vec())
    };
    let (a, b) = run(&model);
    assert_eq!(a, b);
    let w = model.param_index("enc.b1.c0.w").unwrap();
    model.params[w].value.data_mut()[0] += 0.3;
    let (a2, b2) = run(&model);
    assert_eq!(a2, b2);
    assert_ne!(a2, a);
}

fn loss_with(model: &Model<f64>, inputs: &StepInputs<f64>, mode: Mode) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let mut bn = model.bn_stats.clone();
    let out = avt_loss(model, &mut g, &p, &mut bn, inputs, mode, BnMode::Train).unwrap();
    (g.value(out.loss).item(), g.value(out.d).data().to_vec())
}

#[test]
fn aet_mode_is_half_squared_error() {
    let prior = TransformPrior::default();
    let std = TargetStandardizer::calibrate(&prior, 2000, 1).unwrap();
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let model = Model::<f64>::new(tiny_arch(1), &mut r).unwrap();
        let imgs = Tensor::<f64>::randn([4, 1, 16, 16], 1.0, &mut r);
        let latent = model.arch.latent_shape(16, 16);
        let inputs = sample_step_inputs(&mut r, &imgs, &prior, &std, latent, Mode::Aet).unwrap();
        assert!(inputs.eps.is_none());
        let (loss, d) = loss_with(&model, &inputs, Mode::Aet);
        let t = inputs.targets.data();
        let mse = t.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        assert!((loss - 4.0 * LOG_2PI - 0.5 * mse).abs() < 1e-10, "{loss} vs {mse}");
    }
}

#[test]
fn aet_mode_uses_means_for_both_branches() {
    // With zero noise the AVT loss at zero log-variance heads would differ,
    // but the AET loss must not depend on any noise at all.
    let prior = TransformPrior::default();
    let std = TargetStandardizer::default();
    let mut r = rng(21);
    let model = Model::<f64>::new(tiny_arch(1), &mut r).unwrap();
    let imgs = Tensor::<f64>::randn([3, 1, 12, 12], 1.0, &mut r);
    let latent = model.arch.latent_shape(12, 12);
    let mut inputs = sample_step_inputs(&mut r, &imgs, &prior, &std, latent, Mode::Avt).unwrap();
    let (a, _) = loss_with(&model, &inputs, Mode::Aet);
    inputs.eps = Some(Tensor::randn([3, latent[0], latent[1], latent[2]], 5.0, &mut r));
    let (b, _) = loss_with(&model, &inputs, Mode::Aet);
    assert_eq!(a, b);
}

#[test]
fn identity_prior_constant_decoder_hits_closed_form() {
    let prior = TransformPrior::identity();
    let std = TargetStandardizer::calibrate(&prior, 100, 0).unwrap();
    let mut r = rng(9);
    let mut model = Model::<f64>::new(tiny_arch(1), &mut r).unwrap();
    let w = model.param_index("dec.head.w").unwrap();
    let b = model.param_index("dec.head.b").unwrap();
    model.params[w].value.data_mut().fill(0.0);
    let identity_target = std.encode(&Homography::IDENTITY).unwrap();
    let c = -0.75;
    let mut bias = identity_target.to_vec();
    bias.extend([c; 8]);
    model.params[b].value = Tensor::new([16], bias).unwrap();
    let imgs = Tensor::<f64>::randn([3, 1, 12, 12], 1.0, &mut r);
    let latent = model.arch.latent_shape(12, 12);
    let inputs = sample_step_inputs(&mut r, &imgs, &prior, &std, latent, Mode::Avt).unwrap();
    let (loss, _) = loss_with(&model, &inputs, Mode::Avt);
    // Zero residual: ½ Σ_j (c + ln 2π) = 4(c + ln 2π).
    assert!((loss - 4.0 * (c + LOG_2PI)).abs() < 1e-12);
}

#[test]
fn decoder_is_order_sensitive_but_finite() {
    let model = Model::<f64>::new(tiny_arch(1), &mut rng(10)).unwrap();
    let mut r = rng(11);
    let za = Tensor::<f64>::randn([2, 4, 3, 3], 1.0, &mut r);
    let zb = Tensor::<f64>::randn([2, 4, 3, 3], 1.0, &mut r);
    let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let mut bn = model.bn_stats.clone();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let (d, _) = model.decode(&mut g, &p, &mut bn, va, vb, BnMode::Eval).unwrap();
        g.value(d).clone()
    };
    let ab = run(&za, &zb);
    let ba = run(&zb, &za);
    assert!(ab.is_finite() && ba.is_finite());
    assert_ne!(ab, ba);
}

#[test]
fn identity_warp_leaves_original_branch_unchanged() {
    let model = Model::<f64>::new(tiny_arch(1), &mut rng(12)).unwrap();
    let x = Tensor::<f64>::randn([2, 1, 12, 12], 1.0, &mut rng(13));
    let warped = warp_batch(&x, &[Homography::IDENTITY; 2]).unwrap();
    assert_eq!(model.encode_frozen(&x).unwrap(), model.encode_frozen(&warped).unwrap());
}

#[test]
fn full_loss_passes_grad_check() {
    let prior = TransformPrior::default();
    let std = TargetStandardizer::calibrate(&prior, 2000, 2).unwrap();
    let mut r = rng(14);
    let model = Model::<f64>::new(tiny_arch(1), &mut r).unwrap();
    let imgs = Tensor::<f64>::randn([2, 1, 16, 16], 1.0, &mut r);
    let latent = model.arch.latent_shape(16, 16);
    let inputs = sample_step_inputs(&mut r, &imgs, &prior, &std, latent, Mode::Avt).unwrap();
    let values: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        |g, vars| -> Result<Var, ModelError> {
            let mut bn = model.bn_stats.clone();
            Ok(avt_loss(&model, g, vars, &mut bn, &inputs, Mode::Avt, BnMode::Train)?.loss)
        },
        &values,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn mi_estimate_is_zero_at_prior_entropy_and_monotone() {
    let h = surrogate_entropy(&[1.0; 8]);
    assert!((h - 4.0 * (LOG_2PI + 1.0)).abs() < 1e-12);
    assert_eq!(mi_lower_bound_estimate(-h, h), 0.0);
    assert!(mi_lower_bound_estimate(-10.0, h) > mi_lower_bound_estimate(-11.0, h));
}

#[test]
fn surrogate_entropy_matches_fresh_calibration_draws() {
    let prior = TransformPrior::default();
    let std = TargetStandardizer::calibrate(&prior, 100_000, 20190411).unwrap();
    let mut r = rng(77);
    let n = 50_000;
    let mut sum = [0.0; 8];
    let mut sumsq = [0.0; 8];
    for _ in 0..n {
        let (_, h) = sample_homography(&mut r, &prior).unwrap();
        let t = std.encode(&h).unwrap();
        for k in 0..8 {
            sum[k] += t[k];
            sumsq[k] += t[k] * t[k];
        }
    }
    let vars: Vec<f64> = (0..8).map(|k| sumsq[k] / n as f64 - (sum[k] / n as f64).powi(2)).collect();
    let mc = surrogate_entropy(&vars);
    assert!((mc - surrogate_entropy(&[1.0; 8])).abs() < 0.05, "{mc}");
}
