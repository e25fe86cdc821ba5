//! Run orchestration: data loading, the training loop, held-out scoring,
//! checkpointing and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdjointFault, BnMode, Graph};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, DatasetKind, RunConfig};
use crate::data::{batch_indices, gen_synthetic_shapes, load_cifar10, load_mnist_idx, normalize_pair, DataError, Dataset, Split};
use crate::metrics::{MetricRow, MetricsError, MetricsWriter};
use crate::model::{
    avt_loss, gaussian_nll_value, mi_lower_bound_estimate, sample_step_inputs, surrogate_entropy, Mode, Model, ModelError,
    StepInputs,
};
use crate::optim::{lr_schedule, OptimError, Sgd};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::transforms::{TargetStandardizer, TransformError, TARGET_DIM};

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged { epoch: usize, batch: usize, msg: String },
}

impl TrainError {
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::Resume(_))
    }
}

/// Normalized train and test splits for a config.
pub fn load_run_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), TrainError> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            if cfg.train_size == 0 || cfg.test_size == 0 {
                return Err(ConfigError::Invalid("synthetic data needs explicit train_size and test_size".into()).into());
            }
            let all = gen_synthetic_shapes(cfg.synthetic_seed, cfg.train_size + cfg.test_size, cfg.image_size);
            let labels = all.labels.clone().expect("synthetic labels");
            let split = |start: usize, len: usize, split: Split| {
                Dataset::new(
                    all.images.slice_rows(start, len),
                    Some(labels[start..start + len].to_vec()),
                    all.num_classes,
                    split,
                )
            };
            (split(0, cfg.train_size, Split::Train)?, split(cfg.train_size, cfg.test_size, Split::Test)?)
        }
        DatasetKind::Mnist => load_mnist_idx(&cfg.data_dir.join("mnist")).or_else(|_| load_mnist_idx(&cfg.data_dir))?,
        DatasetKind::Cifar10 => load_cifar10(&cfg.data_dir.join("cifar10")).or_else(|_| load_cifar10(&cfg.data_dir))?,
    };
    let cut = |ds: Dataset, n: usize| if n == 0 { ds } else { ds.take(n) };
    let (train, test) = (cut(train, cfg.train_size), cut(test, cfg.test_size));
    Ok(normalize_pair(&train, &test)?)
}

/// Transformations and noise for scoring, drawn once from `eval_seed` so
/// every epoch and every run sees the same held-out problem.
pub struct HeldOut<T: Scalar> {
    pub batches: Vec<StepInputs<T>>,
}

impl<T: Scalar> HeldOut<T> {
    pub fn new(cfg: &RunConfig, test: &Dataset, standardizer: &TargetStandardizer) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
        let [_, h, w] = test.image_shape();
        let latent = cfg.architecture().latent_shape(h, w);
        let prior = cfg.prior();
        let idx: Vec<usize> = (0..test.len()).collect();
        let batches = idx
            .chunks(cfg.batch_size)
            .map(|b| sample_step_inputs(&mut rng, &test.gather::<T>(b), &prior, standardizer, latent, cfg.mode))
            .collect::<Result<_, _>>()?;
        Ok(HeldOut { batches })
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|b| b.targets.shape()[0]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// NLL of the decoder that always predicts the standardized prior
    /// (mean 0, variance 1).
    pub fn constant_nll(&self) -> f64 {
        let t: Vec<f64> = self.batches.iter().flat_map(|b| b.targets.to_f64_vec()).collect();
        let zeros = vec![0.0; t.len()];
        gaussian_nll_value(&t, &zeros, &zeros, TARGET_DIM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOutScore {
    pub nll: f64,
    pub constant_nll: f64,
    /// Lower-bound estimate against the standardized-prior entropy.
    pub mi_estimate: f64,
}

/// Frozen eval-mode NLL on the held-out draws.
pub fn score_heldout<T: Scalar>(model: &Model<T>, mode: Mode, held: &HeldOut<T>) -> Result<HeldOutScore, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in &held.batches {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let mut stats = model.bn_stats.clone();
        let out = avt_loss(model, &mut g, &p, &mut stats, b, mode, BnMode::Eval)?;
        let n = b.targets.shape()[0];
        total += g.value(out.loss).item().as_f64() * n as f64;
        count += n;
    }
    let nll = total / count.max(1) as f64;
    let entropy = surrogate_entropy(&[1.0; TARGET_DIM]);
    Ok(HeldOutScore {
        nll,
        constant_nll: held.constant_nll(),
        mi_estimate: mi_lower_bound_estimate(-nll, entropy),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub heldout: HeldOutScore,
    pub seconds: f64,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
    pub fault: Option<AdjointFault>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub reports: Vec<EpochReport>,
    pub last_checkpoint: Option<PathBuf>,
}

fn rng_metadata(rng: &ChaCha8Rng, meta: &mut BTreeMap<String, String>) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    meta.insert("rng.seed".into(), seed);
    meta.insert("rng.stream".into(), rng.get_stream().to_string());
    meta.insert("rng.word_pos".into(), rng.get_word_pos().to_string());
}

fn rng_from_metadata(meta: &BTreeMap<String, String>) -> Result<ChaCha8Rng, TrainError> {
    let get = |k: &str| meta.get(k).ok_or_else(|| TrainError::Resume(format!("checkpoint lacks `{k}`")));
    let bad = |k: &str| TrainError::Resume(format!("malformed `{k}`"));
    let hex = get("rng.seed")?;
    if hex.len() != 64 {
        return Err(bad("rng.seed"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(get("rng.stream")?.parse().map_err(|_| bad("rng.stream"))?);
    rng.set_word_pos(get("rng.word_pos")?.parse().map_err(|_| bad("rng.word_pos"))?);
    Ok(rng)
}

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("checkpoint-{epochs_done:04}.ckpt")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(path.display().to_string(), e)
}

/// Builds the model a config describes, reproducing the training-time
/// initialization (also the random-encoder baseline).
pub fn init_model<T: Scalar>(cfg: &RunConfig, in_channels: usize) -> Result<(Model<T>, ChaCha8Rng), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut arch = cfg.architecture();
    arch.in_channels = in_channels;
    let model = Model::new(arch, &mut rng)?;
    Ok((model, rng))
}

/// Loads a model from a checkpoint of either precision, returning it at `T`.
pub fn load_model<T: Scalar>(cfg: &RunConfig, in_channels: usize, path: &Path) -> Result<Model<T>, TrainError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (mut model, _) = init_model::<T>(cfg, in_channels)?;
    match crate::checkpoint::peek_precision(&bytes)? {
        p if p == T::PRECISION => Checkpoint::<T>::decode(&bytes)?.restore(&mut model, None)?,
        Precision::F32 => {
            let mut m = model.cast::<f32>();
            Checkpoint::<f32>::decode(&bytes)?.restore(&mut m, None)?;
            model = m.cast();
        }
        Precision::F64 => {
            let mut m = model.cast::<f64>();
            Checkpoint::<f64>::decode(&bytes)?.restore(&mut m, None)?;
            model = m.cast();
        }
    }
    Ok(model)
}

/// Trains per `cfg` (which must already be resolved) on normalized data,
/// writing config, metrics and checkpoints into `cfg.out_dir`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;
    let marker = out.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(io_err(&marker))?;
    }
    let metrics = MetricsWriter::open(&out.join(METRICS_FILE))?;

    let standardizer = cfg.standardizer()?;
    let sgd_cfg = cfg.sgd();
    let prior = cfg.prior();
    let [in_ch, h, w] = train_set.image_shape();
    let latent = cfg.architecture().latent_shape(h, w);
    let fingerprint = cfg.fingerprint().to_string();

    let (mut model, mut rng) = init_model::<T>(cfg, in_ch)?;
    let mut sgd = Sgd::new(&model);
    let mut start = 0;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::<T>::load(path)?;
        let meta = &ck.metadata;
        if meta.get("fingerprint") != Some(&fingerprint) {
            return Err(TrainError::Resume(format!(
                "{} was written under a different configuration",
                path.display()
            )));
        }
        start = meta
            .get("epochs_done")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Resume("checkpoint lacks `epochs_done`".into()))?;
        ck.restore(&mut model, Some(&mut sgd))?;
        rng = rng_from_metadata(meta)?;
    }
    let held = HeldOut::<T>::new(cfg, test_set, &standardizer)?;
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));

    let mut summary = TrainSummary {
        epochs_done: start,
        reports: Vec::new(),
        last_checkpoint: None,
    };
    for epoch in start..end {
        let t0 = std::time::Instant::now();
        let lr = lr_schedule(epoch, &sgd_cfg)?;
        let mut total = 0.0;
        for (bi, batch) in batch_indices(train_set.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let diverged = |msg: String| {
                let _ = std::fs::write(
                    &marker,
                    format!("epoch {epoch} batch {bi}: {msg}\nlast good checkpoint: {}\n", LATEST_CHECKPOINT),
                );
                TrainError::Diverged { epoch, batch: bi, msg }
            };
            let inputs = sample_step_inputs(&mut rng, &train_set.gather::<T>(batch), &prior, &standardizer, latent, cfg.mode)?;
            let mut g = Graph::with_fault(opts.fault);
            let params = model.bind(&mut g);
            let mut stats = std::mem::take(&mut model.bn_stats);
            let res = avt_loss(&model, &mut g, &params, &mut stats, &inputs, cfg.mode, BnMode::Train);
            model.bn_stats = stats;
            let out = match res {
                Ok(o) => o,
                Err(ModelError::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                Err(e) => return Err(e.into()),
            };
            total += g.value(out.loss).item().as_f64() * batch.len() as f64;
            g.backward(out.loss).map_err(ModelError::from)?;
            let grads: Vec<Option<&Tensor<T>>> = params.iter().map(|&p| g.grad(p)).collect();
            match sgd.step(&mut model, &grads, lr, &sgd_cfg) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient(name)) => return Err(diverged(format!("non-finite gradient for `{name}`"))),
                Err(e) => return Err(e.into()),
            }
        }
        let train_nll = total / train_set.len() as f64;
        let heldout = match score_heldout(&model, cfg.mode, &held) {
            Err(TrainError::Model(ModelError::NonFinite(what))) => {
                let msg = format!("non-finite held-out {what}");
                let _ = std::fs::write(&marker, format!("epoch {epoch}: {msg}\nlast good checkpoint: {LATEST_CHECKPOINT}\n"));
                return Err(TrainError::Diverged { epoch, batch: usize::MAX, msg });
            }
            r => r?,
        };
        let report = EpochReport {
            epoch,
            lr,
            train_nll,
            heldout,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let s = cfg.seed;
        metrics.append(&[
            MetricRow::new("train_nll", "", train_nll, s, epoch),
            MetricRow::new("heldout_nll", "", heldout.nll, s, epoch),
            MetricRow::new("const_nll", "", heldout.constant_nll, s, epoch),
            MetricRow::new("mi_estimate", "", heldout.mi_estimate, s, epoch),
            MetricRow::new("lr", "", lr, s, epoch),
        ])?;
        on_epoch(&report);
        summary.reports.push(report);
        summary.epochs_done = epoch + 1;

        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == end {
            let mut meta = BTreeMap::new();
            meta.insert("epochs_done".into(), done.to_string());
            meta.insert("fingerprint".into(), fingerprint.clone());
            meta.insert("mode".into(), cfg.mode.to_string());
            meta.insert("in_channels".into(), in_ch.to_string());
            rng_metadata(&rng, &mut meta);
            let ck = Checkpoint::from_model(&model, Some(&sgd), meta);
            let path = out.join(checkpoint_name(done));
            ck.save(&path)?;
            ck.save(&out.join(LATEST_CHECKPOINT))?;
            summary.last_checkpoint = Some(path);
        }
    }
    Ok(summary)
}

/// Resolves, loads data and trains at the configured precision.
pub fn run_training(
    cfg: &mut RunConfig,
    opts: &TrainOptions,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    cfg.resolve()?;
    let (train_set, test_set) = load_run_data(cfg)?;
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg, &train_set, &test_set, opts, on_epoch),
        Precision::F64 => train::<f64>(cfg, &train_set, &test_set, opts, on_epoch),
    }
}
