//! Per-step metrics records, one JSON object per line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "FINE")]
    Fine,
    #[serde(rename = "COARSE_EVEN")]
    CoarseEven,
    #[serde(rename = "COARSE_ODD")]
    CoarseOdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Fine-level step index (1-based). Coarse records carry the index of
    /// the fine step whose cycle produced them.
    pub step: usize,
    pub level: Level,
    /// Coarse step index within its phase; 0 for fine records.
    pub inner_step: usize,
    pub loss: f64,
    pub lr: f64,
    pub cumulative_flops: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    pub wall_ms: u64,
}

pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    /// Terminal line for an aborted run.
    pub fn append_error(&mut self, step: usize, message: &str) -> Result<()> {
        let line = serde_json::json!({ "error": message, "step": step });
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads every metric record in a file, ignoring a trailing error line.
pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(r) => records.push(r),
            Err(_) => {
                // tolerate the abort line; anything else is malformed
                let v: serde_json::Value = serde_json::from_str(&line)?;
                if v.get("error").is_none() {
                    return Err(Error::Input(format!(
                        "{}: unrecognized metrics line: {line}",
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_and_key_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let record = RunRecord {
            step: 3,
            level: Level::CoarseOdd,
            inner_step: 7,
            loss: 4.25,
            lr: 1.2e-3,
            cumulative_flops: 999,
            tokens_seen: 8192,
            seed: 5,
            wall_ms: 12,
        };
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&record).unwrap();
        w.finish().unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        for key in [
            "step",
            "level",
            "inner_step",
            "loss",
            "lr",
            "cumulative_flops",
            "tokens_seen",
            "seed",
            "wall_ms",
        ] {
            assert!(text.contains(&format!("\"{key}\"")), "missing {key}: {text}");
        }
        assert!(text.contains("COARSE_ODD"));

        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![record]);
    }

    #[test]
    fn error_line_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append_error(9, "non-finite loss").unwrap();
        w.finish().unwrap();
        assert!(read_metrics(&path).unwrap().is_empty());
    }
}
