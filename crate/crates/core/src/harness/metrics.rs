use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of an episode metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub episode: u64,
    /// Agent requests so far, this episode included.
    pub total_requests: u64,
    /// Sum of the per-round team rewards.
    pub team_return: f64,
    /// Agent requests in this episode.
    pub length: u64,
    /// Mean KL over the episode's observations, 0 when it had none.
    pub mean_kl: f64,
    /// `action_counts[modality][action]`, NOP last.
    pub action_counts: Vec<Vec<u64>>,
    pub epsilon: f64,
    pub wall_ms: Option<u64>,
}

/// One line of the pre-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: Option<u64>,
}

/// Append-only JSON Lines writer, flushed after every record.
pub struct MetricsSink<W: Write = BufWriter<File>> {
    out: W,
    path: PathBuf,
    written: u64,
}

impl MetricsSink {
    /// Creates (truncating) `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_writer(BufWriter::new(file), path))
    }
}

impl<W: Write> MetricsSink<W> {
    pub fn from_writer(out: W, label: &Path) -> Self {
        Self {
            out,
            path: label.to_path_buf(),
            written: 0,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn append<S: Serialize>(&mut self, record: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }
}

pub fn log_metrics<W: Write>(sink: &mut MetricsSink<W>, record: &MetricsRecord) -> Result<()> {
    sink.append(record)
}

pub fn log_epoch<W: Write>(sink: &mut MetricsSink<W>, record: &EpochRecord) -> Result<()> {
    sink.append(record)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(path)
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(episode: u64) -> MetricsRecord {
        MetricsRecord {
            episode,
            total_requests: 10 * (episode + 1),
            team_return: 1.0 / 3.0 + episode as f64,
            length: 10,
            mean_kl: 0.1,
            action_counts: vec![vec![3, 1, 0], vec![2, 2, 2]],
            epsilon: 0.7,
            wall_ms: None,
        }
    }

    #[test]
    fn one_line_per_record_and_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        let records: Vec<_> = (0..100).map(record).collect();
        for r in &records {
            log_metrics(&mut sink, r).unwrap();
        }
        assert_eq!(sink.written(), 100);
        drop(sink);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 100);
        assert_eq!(read_metrics(&path).unwrap(), records);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = MetricsSink::create(Path::new("/nonexistent-dir/x.jsonl")).err().unwrap();
        assert!(matches!(err, Error::Io { .. }));
    }
}
