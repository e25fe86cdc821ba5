//! IDX files (big-endian headers), plain or gzip-compressed.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{read_file, DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err(file: &str, msg: impl Into<String>) -> DataError {
    DataError::Format {
        file: file.to_string(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fmt_err(file, "truncated header"))
}

/// Returns `(count, rows, cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt_err(file, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(fmt_err(file, format!("expected {want} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt_err(file, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(fmt_err(file, format!("expected {n} label bytes, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Reads `name`, falling back to `name.gz`.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<(Vec<u8>, String), DataError> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok((read_file(&plain)?, name.to_string()));
    }
    let gz: PathBuf = dir.join(format!("{name}.gz"));
    let raw = read_file(&gz)?;
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|source| DataError::Io { path: gz, source })?;
    Ok((out, format!("{name}.gz")))
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset, DataError> {
    let (ib, iname) = read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lb, lname) = read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, &iname)?;
    let labels = parse_idx_labels(&lb, &lname)?;
    if labels.len() != n {
        return Err(DataError::Mismatch(format!("{iname} has {n} images but {lname} has {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(fmt_err(&lname, format!("label {bad} out of range")));
    }
    let images = Tensor::new([n, 1, rows, cols], pixels).expect("idx layout");
    Dataset::new(images, Some(labels), 10, split)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir`.
pub fn load_mnist_idx(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    Ok((load_split(dir, "train", Split::Train)?, load_split(dir, "t10k", Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magic_mismatch_rejected() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(parse_idx_images(&bytes, "img").unwrap_err().to_string().contains("bad magic"));
        bytes[3] = 3;
        assert!(parse_idx_labels(&bytes[..8], "lbl").is_err());
    }

    #[test]
    fn truncated_body_rejected() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3];
        assert!(parse_idx_images(&bytes, "img").is_err());
        assert!(parse_idx_images(&bytes[..10], "img").is_err());
    }
}
