use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use avt_core::autodiff::AdjointFault;
use avt_core::checkpoint::Checkpoint;
use avt_core::config::{DatasetKind, RunConfig};
use avt_core::data::gen_synthetic_shapes;
use avt_core::model::Mode;
use avt_core::eval::{evaluate_run, EvalOptions};
use avt_core::metrics::{read_metrics, MetricRow, MetricsWriter};
use avt_core::tensor::Tensor;
use avt_core::verify::run_verify;
use avt_core::tensor::{Precision, Scalar};
use avt_core::train::{init_model, load_model, load_run_data, run_training, TrainError, TrainOptions, METRICS_FILE};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avt", version, about = "Train and evaluate transformation-equivariant representations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many completed epochs (a checkpoint is written).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate frozen features of a checkpoint (KNN, probes, held-out NLL).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also score a freshly initialized frozen encoder.
        #[arg(long, value_parser = ["random"])]
        baseline: Option<String>,
        /// Samples averaged per feature row; repeat for an ablation.
        #[arg(long = "k-samples")]
        k_samples: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical self-checks and print a check table.
    Verify {
        /// Corrupt one adjoint to confirm the gradient checks catch it.
        #[arg(long, hide = true)]
        inject_fault: Option<AdjointFault>,
    },
    /// Render SVG charts from a run's metrics.csv.
    Plot {
        /// A run directory or a metrics file.
        #[arg(long)]
        run: PathBuf,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset of a config to a tensor file.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Verify(usize),
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load_config(path: &PathBuf) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let mut cfg = RunConfig::parse(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Config)?;
    if let Ok(dir) = std::env::var("AVT_DATA_DIR") {
        cfg.data_dir = dir.into();
    }
    Ok(cfg)
}

fn train_failure(e: TrainError) -> Failure {
    if e.is_config() {
        Failure::Config(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn eval_at<T: Scalar>(cfg: &RunConfig, checkpoint: &PathBuf, baseline: bool, opts: &EvalOptions) -> anyhow::Result<Vec<MetricRow>> {
    let (train, test) = load_run_data(cfg)?;
    let in_ch = train.image_shape()[0];
    let model = load_model::<T>(cfg, in_ch, checkpoint)?;
    let random = if baseline { Some(init_model::<T>(cfg, in_ch)?.0) } else { None };
    let bytes = std::fs::read(checkpoint)?;
    let epoch = avt_core::checkpoint::Checkpoint::<T>::decode(&bytes)
        .ok()
        .and_then(|c| c.metadata.get("epochs_done").and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    Ok(evaluate_run(cfg, &model, random.as_ref(), &train, &test, opts, epoch)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train {
            config,
            mode,
            resume,
            seed,
            out,
            stop_after,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let opts = TrainOptions {
                resume,
                stop_after,
                fault: None,
            };
            let summary = run_training(&mut cfg, &opts, |r| {
                eprintln!(
                    "epoch {:>4}  lr {:.2e}  train {:.4}  heldout {:.4}  const {:.4}  ({:.1}s)",
                    r.epoch, r.lr, r.train_nll, r.heldout.nll, r.heldout.constant_nll, r.seconds
                );
            })
            .map_err(train_failure)?;
            if let Some(p) = summary.last_checkpoint {
                println!("{}", p.display());
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            config,
            baseline,
            k_samples,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.resolve().map_err(|e| Failure::Config(e.into()))?;
            let mut opts = EvalOptions::from_config(&cfg);
            if !k_samples.is_empty() {
                opts.k_samples = k_samples;
            }
            let baseline = baseline.is_some();
            let rows = match avt_core::checkpoint::peek_precision(&std::fs::read(&checkpoint).map_err(|e| {
                Failure::Runtime(anyhow::Error::new(e).context(format!("reading {}", checkpoint.display())))
            })?)
            .map_err(|e| Failure::Runtime(e.into()))?
            {
                Precision::F32 => eval_at::<f32>(&cfg, &checkpoint, baseline, &opts),
                Precision::F64 => eval_at::<f64>(&cfg, &checkpoint, baseline, &opts),
            }
            .map_err(Failure::Runtime)?;
            std::fs::create_dir_all(&cfg.out_dir)
                .with_context(|| format!("creating {}", cfg.out_dir.display()))
                .map_err(Failure::Runtime)?;
            MetricsWriter::open(&cfg.out_dir.join(METRICS_FILE))
                .and_then(|w| w.append(&rows))
                .map_err(|e| Failure::Runtime(e.into()))?;
            for r in &rows {
                println!("{:<20} {:<28} {:.6}", r.metric, r.param, r.value);
            }
            Ok(())
        }
        Cmd::Verify { inject_fault } => {
            let report = run_verify(inject_fault);
            print!("{}", report.table());
            if report.passed() {
                println!("all {} checks passed", report.rows.len());
                Ok(())
            } else {
                Err(Failure::Verify(report.failures().count()))
            }
        }
        Cmd::Plot { run, out } => {
            for p in cmd_plot(&run, out).map_err(Failure::Runtime)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Cmd::Export { config, out } => {
            let cfg = load_config(&config)?;
            if cfg.dataset != DatasetKind::Synthetic {
                return Err(Failure::Config(anyhow::anyhow!(
                    "export only covers the synthetic dataset, not {}",
                    cfg.dataset.name()
                )));
            }
            cfg.validate().map_err(|e| Failure::Config(e.into()))?;
            cmd_export(&cfg, &out).map_err(Failure::Runtime)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn cmd_plot(run: &Path, out: Option<PathBuf>) -> anyhow::Result<Vec<PathBuf>> {
    let (metrics, dir) = if run.is_dir() {
        (run.join(METRICS_FILE), run.to_path_buf())
    } else {
        (run.to_path_buf(), run.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let rows = read_metrics(&metrics)?;
    let out = out.unwrap_or(dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let charts = avt_cli::plot::charts(&rows);
    anyhow::ensure!(!charts.is_empty(), "{} has no plottable rows", metrics.display());
    let mut written = Vec::new();
    for (name, svg) in charts {
        let path = out.join(name);
        std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn cmd_export(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let n = cfg.train_size + cfg.test_size;
    let ds = gen_synthetic_shapes(cfg.synthetic_seed, n, cfg.image_size);
    let labels = ds.labels.clone().unwrap_or_default();
    let labels = Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())?;
    let metadata = [
        ("dataset", "synthetic".to_string()),
        ("synthetic_seed", cfg.synthetic_seed.to_string()),
        ("train_size", cfg.train_size.to_string()),
        ("test_size", cfg.test_size.to_string()),
        ("num_classes", ds.num_classes.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let ckpt = Checkpoint::<f64> {
        tensors: vec![("images".into(), ds.images), ("labels".into(), labels)],
        optimizer: Vec::new(),
        metadata,
    };
    ckpt.save(out)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
