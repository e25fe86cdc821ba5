//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::Path;

use super::{read_file, DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses records into `(pixels in [0,1], labels)`.
pub fn parse_cifar_records(bytes: &[u8], file: &str) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(DataError::Format {
            file: file.to_string(),
            msg: format!("size {} is not a positive multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(DataError::Format {
                file: file.to_string(),
                msg: format!("label byte {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = read_file(&dir.join(f))?;
        let (p, l) = parse_cifar_records(&bytes, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new([n, 3, 32, 32], pixels).expect("record layout");
    Dataset::new(images, Some(labels), 10, split)
}

/// Loads the five train batches and the test batch from `dir` (or from its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    Ok((load_files(&dir, &TRAIN_FILES, Split::Train)?, load_files(&dir, &[TEST_FILE], Split::Test)?))
}
