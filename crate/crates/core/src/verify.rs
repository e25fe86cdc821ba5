//! Self-check suite: every invariant is measured and compared against its
//! tolerance, producing one report row per check.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AdjointFault, AutodiffError, BnMode, GradCheckConfig, Graph, RunningStats, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{parse_cifar_records, parse_idx_images, parse_idx_labels, CIFAR_RECORD_BYTES};
use crate::eval::{averaging_variance_ratio, Encodings};
use crate::model::{avt_loss, gaussian_nll, sample_step_inputs, Architecture, Mode, Model, ModelError, LOG_2PI};
use crate::tensor::Tensor;
use crate::transforms::{
    dlt_solve, has_collinear_triple, sample_homography, sample_transform, warp_image, Homography, Point, TargetStandardizer,
    TransformPrior, CANONICAL_CORNERS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    /// Error (or violation count) that was observed.
    pub measured: f64,
    /// Largest accepted value of `measured`.
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// Fixed-width table, one line per check.
    pub fn table(&self) -> String {
        let mut s = format!("{:<36} {:>12} {:>12} {:>8}  {}\n", "check", "measured", "tolerance", "secs", "result");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<36} {:>12.3e} {:>12.3e} {:>8.2}  {}\n",
                r.check,
                r.measured,
                r.tolerance,
                r.seconds,
                if r.pass { "PASS" } else { "FAIL" }
            ));
        }
        s
    }

    fn record(&mut self, check: &str, tolerance: f64, f: impl FnOnce() -> Result<f64, String>) {
        let t0 = Instant::now();
        let measured = f().unwrap_or(f64::INFINITY);
        self.rows.push(CheckRow {
            check: check.to_string(),
            measured,
            tolerance,
            pass: measured.is_finite() && measured <= tolerance,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Values in `[lo, hi]` whose magnitude stays at least `gap` away from 0.
fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = r.gen_range(gap..1.5);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `v` to a scalar with fixed random weights, so every output
/// element reaches the loss with a distinct adjoint.
fn weigh(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(randn(&shape, seed));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn gradient_checks(report: &mut VerifyReport, fault: Option<AdjointFault>) {
    let cfg = GradCheckConfig {
        fault,
        ..GradCheckConfig::default()
    };
    let tol = cfg.tolerance;
    type Prog = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;
    let cases: Vec<(&str, Vec<Tensor<f64>>, Prog)> = vec![
        (
            "add",
            vec![randn(&[3, 4], 1), randn(&[3, 4], 2)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weigh(g, y, 9)
            }),
        ),
        (
            "sub",
            vec![randn(&[3, 4], 3), randn(&[3, 4], 4)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weigh(g, y, 9)
            }),
        ),
        (
            "mul",
            vec![randn(&[3, 4], 5), randn(&[3, 4], 6)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weigh(g, y, 9)
            }),
        ),
        (
            "mul_broadcast_scalar",
            vec![randn(&[1], 7), randn(&[3, 4], 8)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weigh(g, y, 9)
            }),
        ),
        (
            "add_scalar_mul_scalar",
            vec![randn(&[5], 10)],
            Box::new(|g, v| {
                let y = g.add_scalar(v[0], 0.7);
                let y = g.mul_scalar(y, -1.3);
                let y = g.mul(y, y)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "exp",
            vec![randn(&[2, 3], 11)],
            Box::new(|g, v| {
                let y = g.exp(v[0]);
                weigh(g, y, 9)
            }),
        ),
        (
            "log",
            vec![randn(&[2, 3], 12)],
            Box::new(|g, v| {
                let e = g.exp(v[0]);
                let y = g.log(e)?;
                let y = g.mul(y, y)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&[4, 5], 0.05, 13)],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                weigh(g, y, 9)
            }),
        ),
        (
            "clamp",
            vec![away_from_zero(&[4, 5], 0.05, 14)],
            Box::new(|g, v| {
                let y = g.clamp(v[0], -0.8, 0.8);
                weigh(g, y, 9)
            }),
        ),
        (
            "sum_mean_reshape",
            vec![randn(&[2, 6], 15)],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let r = g.reshape(sq, [3, 4])?;
                let w = weigh(g, r, 9)?;
                let m = g.mean(v[0]);
                let m2 = g.mul(m, m)?;
                g.add(w, m2)
            }),
        ),
        (
            "conv2d_stride1_pad1",
            vec![randn(&[2, 2, 5, 5], 16), randn(&[3, 2, 3, 3], 17), randn(&[3], 18)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "conv2d_stride2_pad1",
            vec![randn(&[1, 2, 6, 6], 19), randn(&[2, 2, 3, 3], 20), randn(&[2], 21)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "dense",
            vec![randn(&[3, 4], 22), randn(&[4, 5], 23), randn(&[5], 24)],
            Box::new(|g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                weigh(g, y, 9)
            }),
        ),
        (
            "batch_norm2d_train",
            vec![randn(&[3, 2, 2, 2], 25), randn(&[2], 26), randn(&[2], 27)],
            Box::new(|g, v| {
                let mut stats = RunningStats::new(2);
                let y = g.batch_norm2d(v[0], v[1], v[2], BnMode::Train, &mut stats)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "global_avg_pool",
            vec![randn(&[2, 3, 3, 4], 28)],
            Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                let y = g.mul(y, y)?;
                weigh(g, y, 9)
            }),
        ),
        (
            "concat_slice_cols",
            vec![randn(&[2, 3], 29), randn(&[2, 2], 30)],
            Box::new(|g, v| {
                let c = g.concat(v[0], v[1])?;
                let s = g.slice_cols(c, 1, 3)?;
                let s = g.mul(s, s)?;
                weigh(g, s, 9)
            }),
        ),
        (
            "concat_slice_rows",
            vec![randn(&[2, 1, 2, 2], 31), randn(&[1, 1, 2, 2], 32)],
            Box::new(|g, v| {
                let c = g.concat_rows(v[0], v[1])?;
                let s = g.slice_rows(c, 1, 2)?;
                let s = g.mul(s, s)?;
                weigh(g, s, 9)
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![randn(&[4, 3], 33)],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
    ];
    for (name, inputs, prog) in cases {
        report.record(&format!("grad/{name}"), tol, || {
            grad_check(|g, v| prog(g, v), &inputs, &cfg)
                .map(|r| r.max_rel_err())
                .map_err(|e: AutodiffError| e.to_string())
        });
    }

    for mode in [Mode::Avt, Mode::Aet] {
        report.record(&format!("grad/{}_loss_2x16x16", mode.name()), tol, || {
            let mut r = rng(40);
            let prior = TransformPrior::default();
            let st = TargetStandardizer::calibrate(&prior, 2000, 41).map_err(|e| e.to_string())?;
            let arch = Architecture {
                in_channels: 1,
                widths: [3, 4, 4, 3],
            };
            let model = Model::<f64>::new(arch, &mut r).map_err(|e| e.to_string())?;
            let imgs = Tensor::<f64>::randn([2, 1, 16, 16], 1.0, &mut r);
            let inputs = sample_step_inputs(&mut r, &imgs, &prior, &st, arch.latent_shape(16, 16), mode)
                .map_err(|e| e.to_string())?;
            let values: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
            grad_check(
                |g, vars| -> Result<Var, ModelError> {
                    let mut bn = model.bn_stats.clone();
                    Ok(avt_loss(&model, g, vars, &mut bn, &inputs, mode, BnMode::Train)?.loss)
                },
                &values,
                &cfg,
            )
            .map(|r| r.max_rel_err())
            .map_err(|e| e.to_string())
        });
    }
}

fn random_quad<R: Rng>(r: &mut R) -> [Point; 4] {
    loop {
        let q: [Point; 4] = std::array::from_fn(|i| {
            let c = CANONICAL_CORNERS[i];
            [c[0] + r.gen_range(-0.4..0.4), c[1] + r.gen_range(-0.4..0.4)]
        });
        if !has_collinear_triple(&q) {
            return q;
        }
    }
}

fn point_err(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn homography_checks(report: &mut VerifyReport) {
    report.record("homography/dlt_round_trip_x1000", 1e-9, || {
        let mut r = rng(50);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let dst = random_quad(&mut r);
            let h = dlt_solve(&CANONICAL_CORNERS, &dst).map_err(|e| e.to_string())?;
            for (s, d) in CANONICAL_CORNERS.iter().zip(&dst) {
                worst = worst.max(point_err(h.apply(*s).map_err(|e| e.to_string())?, *d));
            }
        }
        Ok(worst)
    });
    report.record("homography/composition_associativity", 1e-12, || {
        let mut r = rng(51);
        let prior = TransformPrior::default();
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let [a, b, c] = std::array::from_fn(|_| sample_homography(&mut r, &prior).map(|(_, h)| h));
            let (a, b, c) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?, c.map_err(|e| e.to_string())?);
            let p = [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)];
            let left = a.compose(&b).compose(&c).apply(p);
            let right = a.compose(&b.compose(&c)).apply(p);
            if let (Ok(x), Ok(y)) = (left, right) {
                worst = worst.max(point_err(x, y));
            }
        }
        Ok(worst)
    });
    report.record("homography/inverse_round_trip", 1e-10, || {
        let mut r = rng(52);
        let prior = TransformPrior::default();
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let (_, h) = sample_homography(&mut r, &prior).map_err(|e| e.to_string())?;
            let back = h.compose(&h.inverse().map_err(|e| e.to_string())?);
            worst = worst.max(back.max_entry_diff(&Homography::IDENTITY));
        }
        Ok(worst)
    });
    report.record("warp/identity_bit_exact", 0.0, || {
        let img = randn(&[3, 9, 7], 53);
        let out = warp_image(&img, &Homography::IDENTITY).map_err(|e| e.to_string())?;
        Ok(if out == img { 0.0 } else { img.max_abs_diff(&out).max(f64::MIN_POSITIVE) })
    });
    for deg in [180.0, 90.0] {
        report.record(&format!("warp/rotation_{deg}_is_permutation"), 0.0, || {
            let (h, w) = if deg == 180.0 { (6, 8) } else { (7, 7) };
            let img = randn(&[2, h, w], 54);
            let out = warp_image(&img, &Homography::rotation_deg(deg)).map_err(|e| e.to_string())?;
            let mut mismatches = 0usize;
            for c in 0..2 {
                for i in 0..h {
                    for j in 0..w {
                        // Output pixel (i, j) samples the input at the inverse-rotated centre.
                        let (si, sj) = if deg == 180.0 { (h - 1 - i, w - 1 - j) } else { (w - 1 - j, i) };
                        let got = out.data()[(c * h + i) * w + j];
                        let want = img.data()[(c * h + si) * w + sj];
                        mismatches += (got != want) as usize;
                    }
                }
            }
            Ok(mismatches as f64)
        });
    }
}

fn loss_checks(report: &mut VerifyReport) {
    report.record("nll/zero_residual_unit_variance", 1e-12, || {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros([3, 8]));
        let lv = g.constant(Tensor::zeros([3, 8]));
        let l = gaussian_nll(&mut g, t, t, lv).map_err(|e| e.to_string())?;
        let v = g.value(l).item();
        Ok((v - 4.0 * LOG_2PI).abs().max(if (v - 7.35151).abs() < 5e-6 { 0.0 } else { 1.0 }))
    });
    report.record("nll/aet_equals_half_mse_plus_const", 1e-10, || {
        let mut r = rng(60);
        let prior = TransformPrior::default();
        let st = TargetStandardizer::calibrate(&prior, 2000, 61).map_err(|e| e.to_string())?;
        let arch = Architecture {
            in_channels: 1,
            widths: [3, 4, 4, 3],
        };
        let model = Model::<f64>::new(arch, &mut r).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let imgs = Tensor::<f64>::randn([4, 1, 16, 16], 1.0, &mut r);
            let inputs = sample_step_inputs(&mut r, &imgs, &prior, &st, arch.latent_shape(16, 16), Mode::Aet)
                .map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let mut bn = model.bn_stats.clone();
            let out = avt_loss(&model, &mut g, &p, &mut bn, &inputs, Mode::Aet, BnMode::Train).map_err(|e| e.to_string())?;
            let d = g.value(out.d).data();
            let t = inputs.targets.data();
            let mse = t.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
            worst = worst.max((g.value(out.loss).item() - (0.5 * mse + 4.0 * LOG_2PI)).abs());
        }
        Ok(worst)
    });
}

fn sampler_checks(report: &mut VerifyReport) {
    let prior = TransformPrior::default();
    let draws = 100_000;
    let mut r = rng(70);
    let samples: Vec<_> = (0..draws).map(|_| sample_transform(&mut r, &prior)).collect();
    report.record("sampler/range_violations_1e5", 0.0, || {
        Ok(samples.iter().filter(|s| !s.within(&prior)).count() as f64)
    });
    report.record("sampler/mean_z_score_max", 3.0, || {
        let n = draws as f64;
        let z = |vals: &mut dyn Iterator<Item = f64>, mid: f64, sd: f64| {
            let m = vals.sum::<f64>() / n;
            ((m - mid) / (sd / n.sqrt())).abs()
        };
        let uniform_sd = |lo: f64, hi: f64| (hi - lo) / 12f64.sqrt();
        let mut worst = z(&mut samples.iter().map(|s| s.scale), 1.0, uniform_sd(0.8, 1.2));
        worst = worst.max(z(&mut samples.iter().map(|s| s.rotation_deg), 135.0, 45.0 * 5f64.sqrt()));
        worst = worst.max(z(&mut samples.iter().map(|s| s.shear_deg), 0.0, uniform_sd(-30.0, 30.0)));
        for k in 0..8 {
            worst = worst.max(z(&mut samples.iter().map(|s| s.corner_jitter[k]), 0.0, uniform_sd(-0.125, 0.125)));
        }
        Ok(worst)
    });
}

fn format_checks(report: &mut VerifyReport) {
    report.record("format/cifar_fixture_byte_exact", 0.0, || {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 3;
        bytes[CIFAR_RECORD_BYTES] = 9;
        for k in 0..3072 {
            bytes[1 + k] = (k % 256) as u8;
            bytes[CIFAR_RECORD_BYTES + 1 + k] = (255 - k % 256) as u8;
        }
        let (pixels, labels) = parse_cifar_records(&bytes, "fixture.bin").map_err(|e| e.to_string())?;
        let mut bad = (labels != vec![3, 9]) as usize;
        for k in 0..3072 {
            bad += (pixels[k] != (k % 256) as f64 / 255.0) as usize;
            bad += (pixels[3072 + k] != (255 - k % 256) as f64 / 255.0) as usize;
        }
        Ok(bad as f64)
    });
    report.record("format/idx_fixture_byte_exact", 0.0, || {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0u8, 1, 2, 3, 100, 101, 102, 103, 252, 253, 254, 255]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        let (n, rows, cols, px) = parse_idx_images(&img, "img").map_err(|e| e.to_string())?;
        let labels = parse_idx_labels(&lbl, "lbl").map_err(|e| e.to_string())?;
        let mut bad = ((n, rows, cols) != (3, 2, 2)) as usize + (labels != vec![7, 0, 9]) as usize;
        bad += px.iter().zip(&img[16..]).filter(|(p, &b)| **p != b as f64 / 255.0).count();
        Ok(bad as f64)
    });
    report.record("format/checkpoint_round_trip", 0.0, || {
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        let ck = Checkpoint::<f32> {
            tensors: vec![("a".into(), Tensor::randn([2, 3], 1.0, &mut rng(80)))],
            optimizer: vec![("a.momentum".into(), Tensor::randn([2, 3], 1.0, &mut rng(81)))],
            metadata: meta,
        };
        let bytes = ck.encode();
        let back = Checkpoint::<f32>::decode(&bytes).map_err(|e| e.to_string())?;
        let mut bad = (back != ck) as usize + (back.encode() != bytes) as usize;
        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x40;
        bad += Checkpoint::<f32>::decode(&corrupt).is_ok() as usize;
        Ok(bad as f64)
    });
}

fn averaging_check(report: &mut VerifyReport) {
    report.record("features/k5_variance_ratio_minus_0.2", 0.05, || {
        let mut r = rng(90);
        let len = 30 * 6 * 4 * 4;
        let enc = Encodings {
            mean: (0..len).map(|_| r.gen_range(-1.0..1.0)).collect(),
            logvar: (0..len).map(|_| r.gen_range(-2.0..0.5)).collect(),
            shape: [30, 6, 4, 4],
            labels: vec![0; 30],
            num_classes: 1,
        };
        let ratio = averaging_variance_ratio(&enc, 5, 100, 91).map_err(|e| e.to_string())?;
        Ok((ratio - 0.2).abs())
    });
}

/// Runs every check. A fault corrupts one adjoint in all gradient checks.
pub fn run_verify(fault: Option<AdjointFault>) -> VerifyReport {
    let mut report = VerifyReport::default();
    gradient_checks(&mut report, fault);
    homography_checks(&mut report);
    loss_checks(&mut report);
    sampler_checks(&mut report);
    format_checks(&mut report);
    averaging_check(&mut report);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_check() {
        let report = run_verify(None);
        assert!(report.passed(), "\n{}", report.table());
        assert!(report.rows.len() >= 25);
    }

    #[test]
    fn injected_faults_are_caught() {
        for (fault, op) in [(AdjointFault::Relu, "grad/relu"), (AdjointFault::Conv2dKernel, "grad/conv2d_stride1_pad1")] {
            let report = run_verify(Some(fault));
            assert!(!report.passed());
            let failed: Vec<&str> = report.failures().map(|r| r.check.as_str()).collect();
            assert!(failed.contains(&op), "{fault:?}: {failed:?}");
            assert!(failed.contains(&"grad/avt_loss_2x16x16"), "{fault:?}: {failed:?}");
            assert!(failed.iter().all(|c| c.starts_with("grad/")), "{failed:?}");
        }
    }
}
