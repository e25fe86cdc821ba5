//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{Architecture, Mode};
use crate::optim::{scaled_waypoints, SgdConfig};
use crate::tensor::Precision;
use crate::transforms::{Family, TargetStandardizer, TransformPrior, TARGET_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("`{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(format!("unknown dataset `{other}` (synthetic, mnist or cifar10)")),
        }
    }
}

/// Every setting of a run. [`RunConfig::to_text`] writes the fully
/// resolved form, which parses back to an equal value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub precision: Precision,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// 0 means the whole split.
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub synthetic_seed: u64,
    pub widths: [usize; 4],
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// `None` rescales the reference waypoints to `epochs`.
    pub warmup_epochs: Option<usize>,
    pub decay_start_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub jitter_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotations: Vec<f64>,
    pub shear_max_deg: f64,
    pub family: Family,
    pub seed: u64,
    pub eval_seed: u64,
    pub checkpoint_every: usize,
    pub k_samples: usize,
    pub knn_ks: Vec<usize>,
    pub probe_epochs: usize,
    pub calibration_draws: usize,
    pub calibration_seed: u64,
    /// Frozen target standardization; computed from the prior when absent.
    pub target_mean: Option<[f64; TARGET_DIM]>,
    pub target_scale: Option<[f64; TARGET_DIM]>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prior = TransformPrior::default();
        let sgd = SgdConfig::default();
        RunConfig {
            mode: Mode::Avt,
            precision: Precision::F32,
            dataset: DatasetKind::Synthetic,
            data_dir: PathBuf::from("data"),
            train_size: 2000,
            test_size: 500,
            image_size: 32,
            synthetic_seed: 1,
            widths: Architecture::default().widths,
            batch_size: 64,
            epochs: 30,
            base_lr: sgd.base_lr,
            peak_lr: sgd.peak_lr,
            final_lr: sgd.final_lr,
            warmup_epochs: None,
            decay_start_epoch: None,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            jitter_max: prior.jitter_max,
            scale_min: prior.scale_min,
            scale_max: prior.scale_max,
            rotations: prior.rotations,
            shear_max_deg: prior.shear_max_deg,
            family: prior.family,
            seed: 0,
            eval_seed: 12345,
            checkpoint_every: 1,
            k_samples: 5,
            knn_ks: vec![3, 5, 10, 15, 20],
            probe_epochs: 20,
            calibration_draws: 100_000,
            calibration_seed: 20190411,
            target_mean: None,
            target_scale: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        msg: format!("`{v}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N], ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = parse_list(key, v)?;
    items.try_into().map_err(|items: Vec<T>| ConfigError::Value {
        key: key.to_string(),
        msg: format!("expected {N} comma-separated values, got {}", items.len()),
    })
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), ToString::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            c.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Value { key: key.to_string(), msg };
        match key {
            "mode" => self.mode = v.parse().map_err(|e: crate::model::ModelError| err(e.to_string()))?,
            "precision" => self.precision = v.parse().map_err(err)?,
            "dataset" => self.dataset = v.parse().map_err(err)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_size" => self.train_size = parse_num(key, v)?,
            "test_size" => self.test_size = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "synthetic_seed" => self.synthetic_seed = parse_num(key, v)?,
            "widths" => self.widths = parse_array(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "base_lr" => self.base_lr = parse_num(key, v)?,
            "peak_lr" => self.peak_lr = parse_num(key, v)?,
            "final_lr" => self.final_lr = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_opt(key, v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse_opt(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "jitter_max" => self.jitter_max = parse_num(key, v)?,
            "scale_min" => self.scale_min = parse_num(key, v)?,
            "scale_max" => self.scale_max = parse_num(key, v)?,
            "rotations" => self.rotations = parse_list(key, v)?,
            "shear_max_deg" => self.shear_max_deg = parse_num(key, v)?,
            "family" => self.family = v.parse().map_err(|e: crate::transforms::TransformError| err(e.to_string()))?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "k_samples" => self.k_samples = parse_num(key, v)?,
            "knn_ks" => self.knn_ks = parse_list(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_num(key, v)?,
            "calibration_draws" => self.calibration_draws = parse_num(key, v)?,
            "calibration_seed" => self.calibration_seed = parse_num(key, v)?,
            "target_mean" => self.target_mean = if v == "auto" { None } else { Some(parse_array(key, v)?) },
            "target_scale" => self.target_scale = if v == "auto" { None } else { Some(parse_array(key, v)?) },
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return inv("batch_size and epochs must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return inv("checkpoint_every must be positive".into());
        }
        if self.image_size < 4 {
            return inv(format!("image_size {} is too small", self.image_size));
        }
        if self.knn_ks.is_empty() || self.knn_ks.contains(&0) {
            return inv("knn_ks must list positive K values".into());
        }
        if self.calibration_draws == 0 {
            return inv("calibration_draws must be positive".into());
        }
        if let Some(s) = &self.target_scale {
            if s.iter().any(|&v| !(v > 0.0)) {
                return inv("target_scale entries must be positive".into());
            }
        }
        self.architecture().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.prior().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sgd().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 3,
            DatasetKind::Synthetic | DatasetKind::Mnist => 1,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: self.in_channels(),
            widths: self.widths,
        }
    }

    pub fn prior(&self) -> TransformPrior {
        TransformPrior {
            jitter_max: self.jitter_max,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            rotations: self.rotations.clone(),
            shear_max_deg: self.shear_max_deg,
            family: self.family,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        let (w, d) = scaled_waypoints(self.epochs);
        SgdConfig {
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs.unwrap_or(w),
            decay_start_epoch: self.decay_start_epoch.unwrap_or(d),
            total_epochs: self.epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// The frozen standardizer, or a fresh calibration when none is set.
    pub fn standardizer(&self) -> Result<TargetStandardizer, crate::transforms::TransformError> {
        match (self.target_mean, self.target_scale) {
            (Some(mean), Some(scale)) => Ok(TargetStandardizer { mean, scale }),
            _ => TargetStandardizer::calibrate(&self.prior(), self.calibration_draws, self.calibration_seed),
        }
    }

    /// Fills in everything left on `auto`, so the written form is complete.
    pub fn resolve(&mut self) -> Result<(), crate::transforms::TransformError> {
        let sgd = self.sgd();
        self.warmup_epochs = Some(sgd.warmup_epochs);
        self.decay_start_epoch = Some(sgd.decay_start_epoch);
        let s = self.standardizer()?;
        self.target_mean = Some(s.mean);
        self.target_scale = Some(s.scale);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.to_string());
        kv("precision", self.precision.to_string());
        kv("dataset", self.dataset.name().to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("train_size", self.train_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("image_size", self.image_size.to_string());
        kv("synthetic_seed", self.synthetic_seed.to_string());
        kv("widths", join(&self.widths));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("peak_lr", self.peak_lr.to_string());
        kv("final_lr", self.final_lr.to_string());
        kv("warmup_epochs", fmt_opt(&self.warmup_epochs));
        kv("decay_start_epoch", fmt_opt(&self.decay_start_epoch));
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("jitter_max", self.jitter_max.to_string());
        kv("scale_min", self.scale_min.to_string());
        kv("scale_max", self.scale_max.to_string());
        kv("rotations", join(&self.rotations));
        kv("shear_max_deg", self.shear_max_deg.to_string());
        kv("family", self.family.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("k_samples", self.k_samples.to_string());
        kv("knn_ks", join(&self.knn_ks));
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("calibration_draws", self.calibration_draws.to_string());
        kv("calibration_seed", self.calibration_seed.to_string());
        kv("target_mean", self.target_mean.map_or("auto".into(), |a| join(&a)));
        kv("target_scale", self.target_scale.map_or("auto".into(), |a| join(&a)));
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// CRC-32 over every setting that influences training (output location,
    /// evaluation-only and schedule-length keys excluded), so a run can be
    /// resumed with a longer or relocated config only if nothing else moved.
    pub fn fingerprint(&self) -> u32 {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data_dir = PathBuf::new();
        c.checkpoint_every = 1;
        c.k_samples = 0;
        c.knn_ks = vec![1];
        c.probe_epochs = 0;
        crc32fast::hash(c.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_lists() {
        let c = RunConfig::parse("# desk run\nwidths = 8, 16, 16, 16\nrotations=0,180 # half turns\nmode = aet\n").unwrap();
        assert_eq!(c.widths, [8, 16, 16, 16]);
        assert_eq!(c.rotations, vec![0.0, 180.0]);
        assert_eq!(c.mode, Mode::Aet);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 2,
                key: "learning_rate".into()
            }
        );
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("widths = 1,2,3").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("scale_min = 2.0").is_err());
        assert!(RunConfig::parse("epochs = 2").is_err());
    }

    #[test]
    fn resolved_form_is_complete_and_stable() {
        let mut c = RunConfig::parse("calibration_draws = 500\nepochs = 30").unwrap();
        c.resolve().unwrap();
        let text = c.to_text();
        assert!(!text.contains("auto"));
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.standardizer().unwrap(), c.standardizer().unwrap());
        assert_eq!(c.sgd().warmup_epochs, 1);
        assert_eq!(c.sgd().decay_start_epoch, 20);
    }

    #[test]
    fn fingerprint_ignores_output_location_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
