//! End-to-end runs of the `avt` binary.

use std::path::Path;
use std::process::{Command, Output};

use avt_core::checkpoint::Checkpoint;
use avt_core::metrics::read_metrics;

const TINY: &str = "\
train_size = 24
test_size = 12
image_size = 16
widths = 3,4,4,3
batch_size = 8
epochs = 3
calibration_draws = 2000
probe_epochs = 2
precision = f64
seed = 3
";

fn avt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avt")).args(args).output().unwrap()
}

fn write_cfg(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "learning_rate = 0.1\n");
    let out = avt(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 11"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let out = avt(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_clean_and_fails_with_fault() {
    let clean = avt(&["verify"]);
    assert_eq!(clean.status.code(), Some(0), "{}", text(&clean.stdout));
    let table = text(&clean.stdout);
    for check in ["grad/avt_loss_2x16x16", "homography/dlt_round_trip_x1000", "warp/rotation_180_is_permutation", "sampler/range_violations_1e5"] {
        assert!(table.contains(check), "missing {check}");
    }
    let faulty = avt(&["verify", "--inject-fault", "conv2d"]);
    assert_eq!(faulty.status.code(), Some(1));
    let table = text(&faulty.stdout);
    let failed: Vec<&str> = table.lines().filter(|l| l.trim_end().ends_with("FAIL")).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|l| l.starts_with("grad/")), "{failed:?}");
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_cfg(dir.path(), "");
    let out = avt(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let ckpt = text(&out.stdout).trim().to_string();
    assert!(Path::new(&ckpt).exists());
    for f in ["config.resolved", "metrics.csv", "latest.ckpt", "checkpoint-0003.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = avt(&[
        "eval", "--checkpoint", &ckpt, "--config", &cfg, "--out", run.to_str().unwrap(),
        "--baseline", "random", "--k-samples", "1", "--k-samples", "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rows = read_metrics(&run.join("metrics.csv")).unwrap();
    let eval_rows: Vec<_> = rows.iter().filter(|r| r.metric.starts_with("knn")).collect();
    for metric in ["knn_error", "knn_error_random", "knn_gap"] {
        for ks in [1, 5] {
            for k in [3, 5, 10, 15, 20] {
                let param = format!("K={k};k_samples={ks}");
                let n = eval_rows.iter().filter(|r| r.metric == metric && r.param == param).count();
                assert_eq!(n, 1, "{metric} {param}");
            }
        }
    }
    assert!(rows.iter().all(|r| r.seed == 3));
    assert!(rows.iter().any(|r| r.metric == "probe_gap"));

    let out = avt(&["plot", "--run", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["loss.svg", "knn.svg"] {
        roxmltree::Document::parse(&std::fs::read_to_string(run.join(f)).unwrap()).unwrap();
    }
}

#[test]
fn aet_mode_and_resume_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("aet");
    let cfg = write_cfg(dir.path(), "");
    let out = avt(&["train", "--config", &cfg, "--mode", "aet", "--out", run.to_str().unwrap(), "--stop-after", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(std::fs::read_to_string(run.join("config.resolved")).unwrap().contains("mode = aet"));
    let latest = run.join("latest.ckpt");
    let out = avt(&["train", "--config", &cfg, "--mode", "aet", "--out", run.to_str().unwrap(), "--resume", latest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(run.join("checkpoint-0003.ckpt").exists());

    // Resuming under a different objective is refused.
    let out = avt(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--resume", latest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = avt(&["eval", "--checkpoint", bad.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!text(&out.stderr).is_empty());
}

#[test]
fn data_dir_override_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "dataset = mnist\n");
    let empty = dir.path().join("nothing-here");
    let out = Command::new(env!("CARGO_BIN_EXE_avt"))
        .args(["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()])
        .env("AVT_DATA_DIR", &empty)
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(text(&out.stderr).contains("nothing-here"), "{}", text(&out.stderr));
}

#[test]
fn export_writes_synthetic_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let path = dir.path().join("shapes.ckpt");
    let out = avt(&["export", "--config", &cfg, "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let ck = Checkpoint::<f64>::load(&path).unwrap();
    let images = &ck.tensors.iter().find(|t| t.0 == "images").unwrap().1;
    assert_eq!(images.shape(), &[36, 1, 16, 16]);
    assert!(images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(ck.metadata["train_size"], "24");
}
