//! Frozen-feature evaluation: sampled feature extraction, KNN, and
//! linear or two-hidden-layer probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, BnMode, Graph, RunningStats, Var};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::metrics::MetricRow;
use crate::model::{Model, ModelError};
use crate::optim::{sgd_step, OptimError};
use crate::tensor::{Scalar, Tensor};
use crate::train::{score_heldout, HeldOut, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("non-finite {0}")]
    NonFinite(String),
}

type Result<T> = std::result::Result<T, EvalError>;

/// One pooled feature vector per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Row-major `len × dim`.
    pub rows: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Samples averaged per row; 0 when the mean was used.
    pub k_samples: usize,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || rows.len() != labels.len() * dim {
            return Err(EvalError::Invalid(format!(
                "{} values do not form {} rows of width {dim}",
                rows.len(),
                labels.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite("feature values".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(EvalError::Invalid(format!("label {bad} ≥ class count {num_classes}")));
        }
        Ok(FeatureMatrix {
            rows,
            dim,
            labels,
            num_classes,
            k_samples: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Frozen encoder outputs for a whole dataset, kept so that many sampled
/// feature sets can be drawn without re-running the network.
#[derive(Debug, Clone)]
pub struct Encodings {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    /// `[N, C, H, W]` of the latent maps.
    pub shape: [usize; 4],
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

pub fn encode_dataset<T: Scalar>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<Encodings> {
    let labels = ds
        .labels
        .clone()
        .ok_or_else(|| EvalError::Invalid("evaluation needs labelled data".into()))?;
    let [_, h, w] = ds.image_shape();
    let [c, lh, lw] = model.arch.latent_shape(h, w);
    let mut mean = Vec::with_capacity(ds.len() * c * lh * lw);
    let mut logvar = Vec::with_capacity(mean.capacity());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for b in idx.chunks(batch_size.max(1)) {
        let (m, lv) = model.encode_frozen(&ds.gather::<T>(b))?;
        mean.extend(m.to_f64_vec());
        logvar.extend(lv.to_f64_vec());
    }
    Ok(Encodings {
        mean,
        logvar,
        shape: [ds.len(), c, lh, lw],
        labels,
        num_classes: ds.num_classes,
    })
}

impl Encodings {
    /// Per image: `k` reparameterized draws `mean + exp(logvar/2)·ε`, each
    /// globally average-pooled, then averaged. `k = 0` pools the mean.
    pub fn sample_features(&self, k: usize, seed: u64) -> Result<FeatureMatrix> {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![0.0; n * c];
        let std: Vec<f64> = self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        for (i, row) in rows.chunks_mut(c).enumerate() {
            for (ch, out) in row.iter_mut().enumerate() {
                let at = (i * c + ch) * plane;
                let m = &self.mean[at..at + plane];
                let s = &std[at..at + plane];
                let mut acc = m.iter().sum::<f64>() * k.max(1) as f64;
                for _ in 0..k {
                    acc += s.iter().map(|sd| sd * rng.sample::<f64, _>(StandardNormal)).sum::<f64>();
                }
                *out = acc / (k.max(1) * plane) as f64;
            }
        }
        let mut fm = FeatureMatrix::new(rows, c, self.labels.clone(), self.num_classes)?;
        fm.k_samples = k;
        Ok(fm)
    }
}

/// Pooled features of the original images of `ds`.
pub fn extract_features<T: Scalar>(model: &Model<T>, ds: &Dataset, k: usize, seed: u64) -> Result<FeatureMatrix> {
    encode_dataset(model, ds, 128)?.sample_features(k, seed)
}

/// Ratio of summed per-element variances of `k`-sample and 1-sample
/// features across `reps` independent extractions.
pub fn averaging_variance_ratio(enc: &Encodings, k: usize, reps: usize, seed: u64) -> Result<f64> {
    let var_sum = |k: usize, seed: u64| -> Result<f64> {
        let runs: Vec<FeatureMatrix> = (0..reps as u64).map(|r| enc.sample_features(k, seed.wrapping_add(r))).collect::<Result<_>>()?;
        let m = runs[0].rows.len();
        let mut total = 0.0;
        for j in 0..m {
            let mean = runs.iter().map(|f| f.rows[j]).sum::<f64>() / reps as f64;
            total += runs.iter().map(|f| (f.rows[j] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        }
        Ok(total)
    };
    if reps < 2 {
        return Err(EvalError::Invalid("need at least two repetitions".into()));
    }
    let one = var_sum(1, seed)?;
    if one <= 0.0 {
        return Err(EvalError::Invalid("features have no sampling variance".into()));
    }
    Ok(var_sum(k, seed.wrapping_add(1 << 32))? / one)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k` nearest training rows (Euclidean; equal
/// distances resolved by training index). Tied votes go to the class with
/// the smallest summed distance, then to the smallest class index.
pub fn knn_classify(train: &FeatureMatrix, test: &FeatureMatrix, k: usize) -> Result<(Vec<usize>, f64)> {
    if train.is_empty() {
        return Err(EvalError::Invalid("empty training set".into()));
    }
    if k == 0 || k > train.len() {
        return Err(EvalError::Invalid(format!("K = {k} with {} training rows", train.len())));
    }
    if train.dim != test.dim {
        return Err(EvalError::Invalid(format!("feature widths {} and {}", train.dim, test.dim)));
    }
    let classes = train.num_classes.max(test.num_classes);
    let mut preds = Vec::with_capacity(test.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for q in 0..test.len() {
        let x = test.row(q);
        dists.clear();
        dists.extend((0..train.len()).map(|i| (sq_dist(x, train.row(i)), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![0usize; classes];
        let mut summed = vec![0.0f64; classes];
        for &(d, i) in &dists[..k] {
            votes[train.labels[i]] += 1;
            summed[train.labels[i]] += d.sqrt();
        }
        let best = (0..classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| votes[b].cmp(&votes[a]).then(summed[a].total_cmp(&summed[b])).then(a.cmp(&b)))
            .expect("k ≥ 1 votes");
        preds.push(best);
    }
    let err = error_rate(&preds, &test.labels);
    Ok((preds, err))
}

pub fn error_rate(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    /// Two hidden layers with batch norm and ReLU.
    Nonlinear,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Nonlinear => "nonlinear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind, epochs: usize, seed: u64) -> Self {
        ProbeConfig {
            kind,
            epochs,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            hidden: 200,
            seed,
        }
    }
}

/// A trained classifier on standardized frozen features.
#[derive(Debug, Clone)]
pub struct Probe {
    pub kind: ProbeKind,
    /// Alternating dense weights and biases, then BN gamma/beta pairs.
    params: Vec<Tensor<f64>>,
    bn: Vec<RunningStats<f64>>,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
}

impl Probe {
    fn init(kind: ProbeKind, dim: usize, classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        let mut bn = Vec::new();
        match kind {
            ProbeKind::Linear => {
                params.push(Tensor::zeros([dim, classes]));
                params.push(Tensor::zeros([classes]));
            }
            ProbeKind::Nonlinear => {
                for (fan_in, fan_out) in [(dim, hidden), (hidden, hidden), (hidden, classes)] {
                    params.push(Tensor::randn([fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng));
                    params.push(Tensor::zeros([fan_out]));
                }
                for _ in 0..2 {
                    params.push(Tensor::ones([hidden]));
                    params.push(Tensor::zeros([hidden]));
                    bn.push(RunningStats::new(hidden));
                }
            }
        }
        Probe {
            kind,
            params,
            bn,
            feat_mean: Vec::new(),
            feat_std: Vec::new(),
        }
    }

    fn standardize(&self, fm: &FeatureMatrix, idx: &[usize]) -> Tensor<f64> {
        let d = fm.dim;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend(fm.row(i).iter().enumerate().map(|(j, v)| (v - self.feat_mean[j]) / self.feat_std[j]));
        }
        Tensor::new([idx.len(), d], out).expect("feature batch")
    }

    fn forward(&self, g: &mut Graph<f64>, p: &[Var], bn: &mut [RunningStats<f64>], x: Var, mode: BnMode) -> Result<Var> {
        match self.kind {
            ProbeKind::Linear => Ok(g.dense(x, p[0], p[1])?),
            ProbeKind::Nonlinear => {
                let n = g.shape(x)[0];
                let mut h = x;
                for layer in 0..2 {
                    let y = g.dense(h, p[2 * layer], p[2 * layer + 1])?;
                    let width = g.shape(y)[1];
                    let y = g.reshape(y, [n, width, 1, 1])?;
                    let y = g.batch_norm2d(y, p[6 + 2 * layer], p[7 + 2 * layer], mode, &mut bn[layer])?;
                    let y = g.reshape(y, [n, width])?;
                    h = g.relu(y);
                }
                Ok(g.dense(h, p[4], p[5])?)
            }
        }
    }

    pub fn predict(&self, fm: &FeatureMatrix) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..fm.len()).collect();
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(self.standardize(fm, &idx));
        let mut bn = self.bn.clone();
        let logits = self.forward(&mut g, &p, &mut bn, x, BnMode::Eval)?;
        let c = g.shape(logits)[1];
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .map(|r| (0..c).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).expect("classes"))
            .collect())
    }
}

/// Fits a probe on `train` by minibatch SGD on softmax cross-entropy and
/// returns it with its error rate on `test`.
pub fn probe_train(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig) -> Result<(Probe, f64)> {
    let mut present = vec![false; train.num_classes];
    train.labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(EvalError::Invalid("probe training needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = train.num_classes.max(test.num_classes);
    let mut probe = Probe::init(cfg.kind, train.dim, classes, cfg.hidden, &mut rng);
    let n = train.len() as f64;
    probe.feat_mean = (0..train.dim).map(|j| (0..train.len()).map(|i| train.row(i)[j]).sum::<f64>() / n).collect();
    probe.feat_std = (0..train.dim)
        .map(|j| {
            let m = probe.feat_mean[j];
            let v = (0..train.len()).map(|i| (train.row(i)[j] - m).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let decay: Vec<bool> = (0..probe.params.len()).map(|i| i < 6 && i % 2 == 0).collect();
    let names: Vec<String> = (0..probe.params.len()).map(|i| format!("probe.{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut velocity: Vec<Tensor<f64>> = probe.params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for epoch in 0..cfg.epochs {
        let lr = if 3 * epoch >= 2 * cfg.epochs { 0.1 * cfg.lr } else { cfg.lr };
        for batch in crate::data::batch_indices(train.len(), cfg.batch_size, &mut rng) {
            if cfg.kind == ProbeKind::Nonlinear && batch.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let p: Vec<Var> = probe.params.iter().map(|t| g.leaf(t.clone())).collect();
            let x = g.constant(probe.standardize(train, &batch));
            let mut bn = std::mem::take(&mut probe.bn);
            let logits = probe.forward(&mut g, &p, &mut bn, x, BnMode::Train);
            probe.bn = bn;
            let loss = g.softmax_cross_entropy(logits?, &labels)?;
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor<f64>>> = p.iter().map(|&v| g.grad(v)).collect();
            let mut params: Vec<&mut Tensor<f64>> = probe.params.iter_mut().collect();
            sgd_step(&mut params, &grads, &mut velocity, &decay, &names, lr, cfg.momentum, cfg.weight_decay)?;
        }
    }
    let err = error_rate(&probe.predict(test)?, &test.labels);
    Ok((probe, err))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Sample counts to evaluate (each gives its own rows).
    pub k_samples: Vec<usize>,
    pub knn_ks: Vec<usize>,
    pub probe_epochs: usize,
    /// Skip probes entirely when false.
    pub probes: bool,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalOptions {
            k_samples: vec![cfg.k_samples],
            knn_ks: cfg.knn_ks.clone(),
            probe_epochs: cfg.probe_epochs,
            probes: cfg.probe_epochs > 0,
            seed: cfg.eval_seed,
        }
    }
}

/// KNN errors keyed by `(k_samples, K)`, and probe errors keyed by
/// `(k_samples, kind)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureScores {
    pub knn: Vec<((usize, usize), f64)>,
    pub probe: Vec<((usize, ProbeKind), f64)>,
}

impl FeatureScores {
    pub fn knn_error(&self, k_samples: usize, k: usize) -> Option<f64> {
        self.knn.iter().find(|(key, _)| *key == (k_samples, k)).map(|(_, v)| *v)
    }
}

pub fn score_features<T: Scalar>(model: &Model<T>, train: &Dataset, test: &Dataset, opts: &EvalOptions) -> Result<FeatureScores> {
    let enc_train = encode_dataset(model, train, 128)?;
    let enc_test = encode_dataset(model, test, 128)?;
    let mut out = FeatureScores::default();
    for &ks in &opts.k_samples {
        let ftrain = enc_train.sample_features(ks, opts.seed)?;
        let ftest = enc_test.sample_features(ks, opts.seed.wrapping_add(1))?;
        for &k in &opts.knn_ks {
            out.knn.push(((ks, k), knn_classify(&ftrain, &ftest, k)?.1));
        }
        if opts.probes {
            for kind in [ProbeKind::Linear, ProbeKind::Nonlinear] {
                let (_, err) = probe_train(&ftrain, &ftest, &ProbeConfig::new(kind, opts.probe_epochs, opts.seed))?;
                out.probe.push(((ks, kind), err));
            }
        }
    }
    Ok(out)
}

fn param(ks: usize, extra: &str) -> String {
    format!("{extra};k_samples={ks}")
}

/// Metric rows for a trained model and, optionally, a frozen random
/// encoder of the same architecture with signed gaps (random − trained).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run<T: Scalar>(
    cfg: &RunConfig,
    model: &Model<T>,
    random: Option<&Model<T>>,
    train: &Dataset,
    test: &Dataset,
    opts: &EvalOptions,
    epoch: usize,
) -> Result<Vec<MetricRow>> {
    let seed = cfg.seed;
    let mut rows = Vec::new();
    let held = HeldOut::<T>::new(cfg, test, &cfg.standardizer().map_err(TrainError::from)?)?;
    let score = score_heldout(model, cfg.mode, &held)?;
    rows.push(MetricRow::new("heldout_nll", "", score.nll, seed, epoch));
    rows.push(MetricRow::new("const_nll", "", score.constant_nll, seed, epoch));
    rows.push(MetricRow::new("mi_estimate", "", score.mi_estimate, seed, epoch));

    let trained = score_features(model, train, test, opts)?;
    let baseline = random.map(|m| score_features(m, train, test, opts)).transpose()?;
    for (i, &((ks, k), err)) in trained.knn.iter().enumerate() {
        let p = param(ks, &format!("K={k}"));
        rows.push(MetricRow::new("knn_error", p.clone(), err, seed, epoch));
        if let Some(b) = &baseline {
            let r = b.knn[i].1;
            rows.push(MetricRow::new("knn_error_random", p.clone(), r, seed, epoch));
            rows.push(MetricRow::new("knn_gap", p, r - err, seed, epoch));
        }
    }
    for (i, &((ks, kind), err)) in trained.probe.iter().enumerate() {
        let p = param(ks, &format!("kind={}", kind.name()));
        rows.push(MetricRow::new("probe_error", p.clone(), err, seed, epoch));
        if let Some(b) = &baseline {
            let r = b.probe[i].1;
            rows.push(MetricRow::new("probe_error_random", p.clone(), r, seed, epoch));
            rows.push(MetricRow::new("probe_gap", p, r - err, seed, epoch));
        }
    }
    Ok(rows)
}
