//! Multi-seed aggregation of fine-level loss curves into a CSV summary.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::record::{read_metrics, Level};

/// Per-step statistics across runs that differ only by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub steps: Vec<usize>,
    /// `[run][step index]`
    pub per_run_loss: Vec<Vec<f64>>,
    pub loss_mean: Vec<f64>,
    /// Sample standard deviation (n-1); 0 for a single run.
    pub loss_std: Vec<f64>,
    pub per_run_flops: Vec<Vec<u64>>,
    pub flops_mean: Vec<f64>,
}

pub(crate) fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(kv)
}

/// Keys allowed to differ between runs of one aggregation group.
const PER_RUN_KEYS: [&str; 2] = ["seed", "out_dir"];

pub fn aggregate(run_dirs: &[impl AsRef<Path>]) -> Result<Summary> {
    if run_dirs.is_empty() {
        return Err(Error::Aggregation("no run directories given".into()));
    }

    let mut reference: Option<BTreeMap<String, String>> = None;
    let mut seeds = Vec::new();
    let mut per_run_loss: Vec<Vec<f64>> = Vec::new();
    let mut per_run_flops: Vec<Vec<u64>> = Vec::new();
    let mut steps: Option<Vec<usize>> = None;

    for dir in run_dirs {
        let dir = dir.as_ref();
        let mut kv = read_kv_file(&dir.join("config.txt"))?;
        let seed: u64 = kv
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Aggregation(format!("{}: missing seed", dir.display())))?;
        for key in PER_RUN_KEYS {
            kv.remove(key);
        }
        match &reference {
            None => reference = Some(kv),
            Some(reference) => {
                if *reference != kv {
                    let diff: Vec<String> = reference
                        .iter()
                        .filter(|(k, v)| kv.get(*k) != Some(v))
                        .map(|(k, _)| k.clone())
                        .chain(kv.keys().filter(|k| !reference.contains_key(*k)).cloned())
                        .collect();
                    return Err(Error::Aggregation(format!(
                        "{}: config differs from the first run in {:?}",
                        dir.display(),
                        diff
                    )));
                }
            }
        }

        let records = read_metrics(&dir.join("metrics.jsonl"))?;
        let fine: Vec<_> = records
            .iter()
            .filter(|r| r.level == Level::Fine)
            .collect();
        if fine.is_empty() {
            return Err(Error::Aggregation(format!(
                "{}: no fine-level records",
                dir.display()
            )));
        }
        let run_steps: Vec<usize> = fine.iter().map(|r| r.step).collect();
        match &steps {
            None => steps = Some(run_steps),
            Some(expected) => {
                if *expected != run_steps {
                    return Err(Error::Aggregation(format!(
                        "{}: step sequence differs",
                        dir.display()
                    )));
                }
            }
        }
        seeds.push(seed);
        per_run_loss.push(fine.iter().map(|r| r.loss).collect());
        per_run_flops.push(fine.iter().map(|r| r.cumulative_flops).collect());
    }

    let steps = steps.unwrap();
    let runs = per_run_loss.len();
    let mut loss_mean = Vec::with_capacity(steps.len());
    let mut loss_std = Vec::with_capacity(steps.len());
    let mut flops_mean = Vec::with_capacity(steps.len());
    for i in 0..steps.len() {
        let losses: Vec<f64> = per_run_loss.iter().map(|r| r[i]).collect();
        let mean = losses.iter().sum::<f64>() / runs as f64;
        let std = if runs > 1 {
            (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (runs - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        loss_mean.push(mean);
        loss_std.push(std);
        flops_mean.push(per_run_flops.iter().map(|r| r[i] as f64).sum::<f64>() / runs as f64);
    }

    Ok(Summary {
        seeds,
        steps,
        per_run_loss,
        loss_mean,
        loss_std,
        per_run_flops,
        flops_mean,
    })
}

pub fn write_summary_csv(summary: &Summary, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("step");
    for seed in &summary.seeds {
        out.push_str(&format!(",loss_s{seed}"));
    }
    out.push_str(",loss_mean,loss_std");
    for seed in &summary.seeds {
        out.push_str(&format!(",flops_s{seed}"));
    }
    out.push_str(",flops_mean\n");
    for i in 0..summary.steps.len() {
        out.push_str(&summary.steps[i].to_string());
        for run in &summary.per_run_loss {
            out.push_str(&format!(",{}", run[i]));
        }
        out.push_str(&format!(",{},{}", summary.loss_mean[i], summary.loss_std[i]));
        for run in &summary.per_run_flops {
            out.push_str(&format!(",{}", run[i]));
        }
        out.push_str(&format!(",{}\n", summary.flops_mean[i]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Aggregation(format!("{}: empty summary", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let seeds: Vec<u64> = columns
        .iter()
        .filter_map(|c| c.strip_prefix("loss_s"))
        .filter_map(|s| s.parse().ok())
        .collect();
    let runs = seeds.len();
    let expected_columns = 1 + runs + 2 + runs + 1;
    if columns.len() != expected_columns {
        return Err(Error::Aggregation(format!(
            "{}: malformed header '{header}'",
            path.display()
        )));
    }

    let mut summary = Summary {
        seeds,
        steps: Vec::new(),
        per_run_loss: vec![Vec::new(); runs],
        loss_mean: Vec::new(),
        loss_std: Vec::new(),
        per_run_flops: vec![Vec::new(); runs],
        flops_mean: Vec::new(),
    };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_columns {
            return Err(Error::Aggregation(format!(
                "{}: malformed row '{line}'",
                path.display()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Aggregation(format!("bad number '{s}'")))
        };
        summary.steps.push(parse(fields[0])? as usize);
        for r in 0..runs {
            summary.per_run_loss[r].push(parse(fields[1 + r])?);
        }
        summary.loss_mean.push(parse(fields[1 + runs])?);
        summary.loss_std.push(parse(fields[2 + runs])?);
        for r in 0..runs {
            summary.per_run_flops[r].push(parse(fields[3 + runs + r])? as u64);
        }
        summary.flops_mean.push(parse(fields[3 + 2 * runs])?);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let dir = tempfile::tempdir().unwrap();
        for (seed, loss) in [(1u64, 1.0f64), (2, 3.0)] {
            let run_dir = dir.path().join(format!("seed{seed}"));
            std::fs::create_dir_all(&run_dir).unwrap();
            std::fs::write(
                run_dir.join("config.txt"),
                format!("mode = single\nseed = {seed}\nout_dir = x{seed}\n"),
            )
            .unwrap();
            std::fs::write(
                run_dir.join("metrics.jsonl"),
                format!(
                    "{{\"step\":1,\"level\":\"FINE\",\"inner_step\":0,\"loss\":{loss},\"lr\":0.001,\"cumulative_flops\":100,\"tokens_seen\":10,\"seed\":{seed},\"wall_ms\":1}}\n"
                ),
            )
            .unwrap();
        }
        let summary =
            aggregate(&[dir.path().join("seed1"), dir.path().join("seed2")]).unwrap();
        assert_eq!(summary.loss_mean, vec![2.0]);
        assert!((summary.loss_std[0] - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(summary.flops_mean, vec![100.0]);

        // single run reports std 0
        let single = aggregate(&[dir.path().join("seed1")]).unwrap();
        assert_eq!(single.loss_std, vec![0.0]);
    }

    #[test]
    fn mismatched_configs_error() {
        let dir = tempfile::tempdir().unwrap();
        for (seed, mode) in [(1u64, "single"), (2, "multilevel")] {
            let run_dir = dir.path().join(format!("seed{seed}"));
            std::fs::create_dir_all(&run_dir).unwrap();
            std::fs::write(
                run_dir.join("config.txt"),
                format!("mode = {mode}\nseed = {seed}\n"),
            )
            .unwrap();
            std::fs::write(
                run_dir.join("metrics.jsonl"),
                format!(
                    "{{\"step\":1,\"level\":\"FINE\",\"inner_step\":0,\"loss\":1.0,\"lr\":0.001,\"cumulative_flops\":100,\"tokens_seen\":10,\"seed\":{seed},\"wall_ms\":1}}\n"
                ),
            )
            .unwrap();
        }
        let err = aggregate(&[dir.path().join("seed1"), dir.path().join("seed2")]).unwrap_err();
        assert!(matches!(err, Error::Aggregation(_)), "{err}");
        assert!(err.to_string().contains("mode"));
    }

    #[test]
    fn csv_round_trip() {
        let summary = Summary {
            seeds: vec![4, 9],
            steps: vec![1, 2],
            per_run_loss: vec![vec![1.0, 0.5], vec![2.0, 1.5]],
            loss_mean: vec![1.5, 1.0],
            loss_std: vec![0.7071067811865476, 0.7071067811865476],
            per_run_flops: vec![vec![10, 20], vec![10, 20]],
            flops_mean: vec![10.0, 20.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        write_summary_csv(&summary, &path).unwrap();
        let back = read_summary_csv(&path).unwrap();
        assert_eq!(back, summary);
    }
}
