//! Datasets: binary-format loaders, the synthetic shapes corpus,
//! normalization and shuffled batching.

mod cifar;
mod mnist;
mod synthetic;

pub use cifar::{load_cifar10, parse_cifar_records, CIFAR_RECORD_BYTES};
pub use mnist::{load_mnist_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::gen_synthetic_shapes;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error("dataset mismatch: {0}")]
    Mismatch(String),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel standardization constants (always taken from a train split).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images as `N×C×H×W` values, in `[0, 1]` until normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
    /// Set once the images have been standardized.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Option<Vec<usize>>, num_classes: usize, split: Split) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::Mismatch(format!("expected N×C×H×W images, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(DataError::Mismatch(format!("{} labels for {} images", l.len(), images.shape()[0])));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(DataError::Mismatch(format!("label {bad} ≥ class count {num_classes}")));
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            num_classes: self.num_classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }

    /// Stacks the selected images into a batch of the requested precision.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend(src[i * per..(i + 1) * per].iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new([idx.len(), c, h, w], out).expect("gathered batch")
    }

    pub fn gather_labels(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }
}

impl NormStats {
    /// Per-channel mean and (population) standard deviation of a train split.
    pub fn from_train(ds: &Dataset) -> Result<Self, DataError> {
        if ds.split != Split::Train {
            return Err(DataError::Mismatch("normalization stats must come from a train split".into()));
        }
        let [c, h, w] = ds.image_shape();
        let plane = h * w;
        let n = ds.len();
        let count = (n * plane).max(1) as f64;
        let data = ds.images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| data[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter());
            let m = vals.clone().sum::<f64>() / count;
            let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        Ok(NormStats { mean, std })
    }

    fn map(&self, ds: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<f64> {
        let [c, h, w] = ds.image_shape();
        let plane = h * w;
        let mut out = ds.images.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (k / plane) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }

    pub fn normalize(&self, ds: &Dataset) -> Result<Dataset, DataError> {
        if ds.norm.is_some() {
            return Err(DataError::Mismatch("dataset is already normalized".into()));
        }
        if ds.image_shape()[0] != self.mean.len() {
            return Err(DataError::Mismatch(format!(
                "{} channels vs {} normalization channels",
                ds.image_shape()[0],
                self.mean.len()
            )));
        }
        Ok(Dataset {
            images: self.map(ds, |x, m, s| (x - m) / s),
            norm: Some(self.clone()),
            ..ds.clone()
        })
    }

    pub fn denormalize(&self, ds: &Dataset) -> Dataset {
        Dataset {
            images: self.map(ds, |x, m, s| x * s + m),
            norm: None,
            ..ds.clone()
        }
    }
}

/// Standardizes both splits with statistics of the train split.
pub fn normalize_pair(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset), DataError> {
    let stats = NormStats::from_train(train)?;
    Ok((stats.normalize(train)?, stats.normalize(test)?))
}

/// A fresh random permutation of `0..n` cut into batches; the last short
/// batch is kept.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(split: Split, seed: u64) -> Dataset {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let imgs = Tensor::uniform([10, 3, 4, 4], 0.0, 1.0, &mut r);
        Dataset::new(imgs, Some((0..10).map(|i| i % 3).collect()), 3, split).unwrap()
    }

    #[test]
    fn normalization_centers_train_and_reuses_stats() {
        let (train, test) = (toy(Split::Train, 1), toy(Split::Test, 2));
        let (ntrain, ntest) = normalize_pair(&train, &test).unwrap();
        let again = NormStats::from_train(&ntrain).unwrap();
        for ch in 0..3 {
            assert!(again.mean[ch].abs() < 1e-10);
            assert!((again.std[ch] - 1.0).abs() < 1e-10);
        }
        assert_eq!(ntest.norm, ntrain.norm);
        assert!(NormStats::from_train(&test).is_err());
    }

    #[test]
    fn denormalize_inverts() {
        let train = toy(Split::Train, 3);
        let stats = NormStats::from_train(&train).unwrap();
        let back = stats.denormalize(&stats.normalize(&train).unwrap());
        assert!(back.images.max_abs_diff(&train.images) < 1e-12);
        assert!(back.norm.is_none());
    }

    #[test]
    fn batches_are_seeded_permutations() {
        let a = batch_indices(10, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let b = batch_indices(10, 4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let first = batch_indices(10, 4, &mut r);
        let second = batch_indices(10, 4, &mut r);
        assert_ne!(first, second);
    }

    #[test]
    fn labels_validated() {
        let imgs = Tensor::zeros([2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), Some(vec![0, 5]), 3, Split::Train).is_err());
        assert!(Dataset::new(imgs, Some(vec![0]), 3, Split::Train).is_err());
    }

    #[test]
    fn gather_casts_rows() {
        let ds = toy(Split::Train, 4);
        let b: Tensor<f32> = ds.gather(&[3, 1]);
        assert_eq!(b.shape(), &[2, 3, 4, 4]);
        assert_eq!(b.data()[0], ds.images.data()[3 * 48] as f32);
        assert_eq!(ds.gather_labels(&[3, 1]), Some(vec![0, 1]));
    }
}
