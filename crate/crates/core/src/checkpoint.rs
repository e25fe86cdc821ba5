//! Binary checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "AVTCKPT1" | version u8 | precision u8 (32 or 64)
//! tensors:   count u64, then per tensor: name (u64 length + UTF-8),
//!            rank u64, extents u64 × rank, values
//! optimizer: same encoding
//! metadata:  count u64, then key and value strings (u64 length + UTF-8)
//! crc32 of everything above, u32
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::RunningStats;
use crate::model::Model;
use crate::optim::Sgd;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"AVTCKPT1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u8),
    #[error("checkpoint holds {found} values but {expected} was requested")]
    Precision { found: String, expected: Precision },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
}

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub tensors: NamedTensors<T>,
    pub optimizer: NamedTensors<T>,
    pub metadata: BTreeMap<String, String>,
}

fn precision_byte(p: Precision) -> u8 {
    match p {
        Precision::F32 => 32,
        Precision::F64 => 64,
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors<T: Scalar>(out: &mut Vec<u8>, ts: &[(String, Tensor<T>)]) {
    put_u64(out, ts.len() as u64);
    for (name, t) in ts {
        put_str(out, name);
        put_u64(out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        let rest = (self.buf.len() - self.pos) as u64;
        if v > rest.saturating_mul(8).max(1 << 20) {
            return Err(CheckpointError::Truncated);
        }
        Ok(v as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn tensors<T: Scalar>(&mut self) -> Result<NamedTensors<T>, CheckpointError> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.len()?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(self.len()?);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let bytes = self.take(n.checked_mul(T::PRECISION.bytes()).ok_or(CheckpointError::Truncated)?)?;
            let data = bytes.chunks_exact(T::PRECISION.bytes()).map(T::read_le).collect();
            out.push((name, Tensor::new(shape, data).expect("extent product")));
        }
        Ok(out)
    }
}

/// Precision recorded in a checkpoint header, without decoding the rest.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision, CheckpointError> {
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes[8] != VERSION {
        return Err(CheckpointError::Version(bytes[8]));
    }
    match bytes[9] {
        32 => Ok(Precision::F32),
        64 => Ok(Precision::F64),
        b => Err(CheckpointError::Malformed(format!("precision byte {b}"))),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(precision_byte(T::PRECISION));
        put_tensors(&mut out, &self.tensors);
        put_tensors(&mut out, &self.optimizer);
        put_u64(&mut out, self.metadata.len() as u64);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let found = peek_precision(bytes)?;
        if bytes.len() < 14 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        if found != T::PRECISION {
            return Err(CheckpointError::Precision {
                found: found.to_string(),
                expected: T::PRECISION,
            });
        }
        let mut r = Reader { buf: body, pos: 10 };
        let tensors = r.tensors()?;
        let optimizer = r.tensors()?;
        let count = r.len()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..count {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            tensors,
            optimizer,
            metadata,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io(path.display().to_string(), e);
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.encode()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
        Self::decode(&bytes)
    }

    /// Parameters, running statistics and momentum buffers of a model.
    pub fn from_model(model: &Model<T>, sgd: Option<&Sgd<T>>, metadata: BTreeMap<String, String>) -> Self {
        let mut tensors: NamedTensors<T> = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, s) in model.bn_names.iter().zip(&model.bn_stats) {
            let c = s.channels();
            tensors.push((format!("{name}.running_mean"), Tensor::new([c], s.mean.clone()).expect("channels")));
            tensors.push((format!("{name}.running_var"), Tensor::new([c], s.var.clone()).expect("channels")));
        }
        let optimizer = match sgd {
            Some(s) => model
                .params
                .iter()
                .zip(&s.velocity)
                .map(|(p, v)| (format!("{}.momentum", p.name), v.clone()))
                .collect(),
            None => Vec::new(),
        };
        Checkpoint {
            tensors,
            optimizer,
            metadata,
        }
    }

    /// Copies stored state into `model` (and `sgd`, when the checkpoint has
    /// optimizer buffers). Every name and shape must match.
    pub fn restore(&self, model: &mut Model<T>, sgd: Option<&mut Sgd<T>>) -> Result<(), CheckpointError> {
        let lookup: BTreeMap<&str, &Tensor<T>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = model.params.len() + 2 * model.bn_stats.len();
        if lookup.len() != expected {
            return Err(CheckpointError::Incompatible(format!(
                "{} tensors stored, model has {expected}",
                lookup.len()
            )));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>, CheckpointError> {
            let t = lookup
                .get(name)
                .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(CheckpointError::Incompatible(format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok((*t).clone())
        };
        let mut params = Vec::with_capacity(model.params.len());
        for p in &model.params {
            params.push(fetch(&p.name, p.value.shape())?);
        }
        let mut stats = Vec::with_capacity(model.bn_stats.len());
        for (name, s) in model.bn_names.iter().zip(&model.bn_stats) {
            let c = [s.channels()];
            stats.push(RunningStats {
                mean: fetch(&format!("{name}.running_mean"), &c)?.into_data(),
                var: fetch(&format!("{name}.running_var"), &c)?.into_data(),
            });
        }
        let velocity = match (&sgd, self.optimizer.is_empty()) {
            (Some(_), false) => {
                let opt: BTreeMap<&str, &Tensor<T>> = self.optimizer.iter().map(|(n, t)| (n.as_str(), t)).collect();
                let mut v = Vec::with_capacity(model.params.len());
                for p in &model.params {
                    let name = format!("{}.momentum", p.name);
                    let t = opt
                        .get(name.as_str())
                        .ok_or_else(|| CheckpointError::Incompatible(format!("missing buffer `{name}`")))?;
                    if t.shape() != p.value.shape() {
                        return Err(CheckpointError::Incompatible(format!("`{name}` has the wrong shape")));
                    }
                    v.push((*t).clone());
                }
                Some(v)
            }
            (Some(_), true) => return Err(CheckpointError::Incompatible("no optimizer state stored".into())),
            (None, _) => None,
        };
        for (p, t) in model.params.iter_mut().zip(params) {
            p.value = t;
        }
        model.bn_stats = stats;
        if let (Some(s), Some(v)) = (sgd, velocity) {
            s.velocity = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Model<f64>, Sgd<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture {
            in_channels: 1,
            widths: [2, 3, 3, 2],
        };
        let mut model = Model::new(arch, &mut r).unwrap();
        model.bn_stats[0].mean[1] = 0.25;
        let mut sgd = Sgd::new(&model);
        sgd.velocity[0].data_mut()[0] = -1.5;
        (model, sgd)
    }

    fn meta() -> BTreeMap<String, String> {
        [("epoch".to_string(), "2".to_string())].into_iter().collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, sgd) = sample();
        let ck = Checkpoint::from_model(&model, Some(&sgd), meta());
        let back = Checkpoint::<f64>::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = Model::new(model.arch, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut fresh_sgd = Sgd::new(&fresh);
        back.restore(&mut fresh, Some(&mut fresh_sgd)).unwrap();
        assert_eq!(fresh.params, model.params);
        assert_eq!(fresh.bn_stats, model.bn_stats);
        assert_eq!(fresh_sgd, sgd);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let (model, sgd) = sample();
        let ck = Checkpoint::from_model(&model, Some(&sgd), meta());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), ck);
        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f64>::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn header_faults() {
        let (model, _) = sample();
        let mut bytes = Checkpoint::from_model(&model, None, meta()).encode();
        assert!(matches!(Checkpoint::<f32>::decode(&bytes), Err(CheckpointError::Precision { .. })));
        bytes[8] = 9;
        assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(CheckpointError::Version(9))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (model, _) = sample();
        let mut bytes = Checkpoint::from_model(&model, None, meta()).encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn incompatible_model_rejected_without_partial_state() {
        let (model, _) = sample();
        let ck = Checkpoint::from_model(&model, None, meta());
        let other_arch = Architecture {
            in_channels: 1,
            widths: [2, 4, 3, 2],
        };
        let mut other = Model::<f64>::new(other_arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = other.params.clone();
        assert!(ck.restore(&mut other, None).is_err());
        assert_eq!(other.params, before);
    }

    #[test]
    fn f32_round_trip() {
        let (model, _) = sample();
        let m32: Model<f32> = model.cast();
        let s32 = Sgd::new(&m32);
        let ck = Checkpoint::from_model(&m32, Some(&s32), meta());
        let bytes = ck.encode();
        assert_eq!(peek_precision(&bytes).unwrap(), Precision::F32);
        assert_eq!(Checkpoint::<f32>::decode(&bytes).unwrap(), ck);
    }
}
