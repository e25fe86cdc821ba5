//! Append-only CSV metrics: `metric,param,value,seed,epoch`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const HEADER: &str = "metric,param,value,seed,epoch";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{file} line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    /// Free-form `key=value;key=value` qualifiers, possibly empty.
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub epoch: usize,
}

impl MetricRow {
    pub fn new(metric: &str, param: impl Into<String>, value: f64, seed: u64, epoch: usize) -> Self {
        MetricRow {
            metric: metric.to_string(),
            param: param.into(),
            value,
            seed,
            epoch,
        }
    }

    fn to_line(&self) -> String {
        format!("{},{},{},{},{}", self.metric, self.param, self.value, self.seed, self.epoch)
    }
}

/// Appends rows to a metrics file, writing the header once.
#[derive(Debug, Clone)]
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self, MetricsError> {
        let io = |e| MetricsError::Io(path.display().to_string(), e);
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if fresh {
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            writeln!(f, "{HEADER}").map_err(io)?;
        }
        Ok(MetricsWriter { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, rows: &[MetricRow]) -> Result<(), MetricsError> {
        let io = |e| MetricsError::Io(self.path.display().to_string(), e);
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(io)?;
        let mut buf = String::new();
        for r in rows {
            if r.metric.contains(',') || r.param.contains(',') {
                return Err(MetricsError::Parse {
                    file: self.path.display().to_string(),
                    line: 0,
                    msg: format!("field of `{}` contains a comma", r.metric),
                });
            }
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(io)
    }
}

pub fn parse_metrics(text: &str, file: &str) -> Result<Vec<MetricRow>, MetricsError> {
    let err = |line: usize, msg: String| MetricsError::Parse {
        file: file.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header `{HEADER}`, got `{h}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(i + 1, format!("expected 5 fields, got {}", f.len())));
        }
        let value = f[2].parse().map_err(|e| err(i + 1, format!("value `{}`: {e}", f[2])))?;
        let seed = f[3].parse().map_err(|e| err(i + 1, format!("seed `{}`: {e}", f[3])))?;
        let epoch = f[4].parse().map_err(|e| err(i + 1, format!("epoch `{}`: {e}", f[4])))?;
        rows.push(MetricRow {
            metric: f[0].to_string(),
            param: f[1].to_string(),
            value,
            seed,
            epoch,
        });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Io(path.display().to_string(), e))?;
    parse_metrics(&text, &path.display().to_string())
}
