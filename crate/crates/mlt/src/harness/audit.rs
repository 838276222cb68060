//! Recomputes cumulative FLOPs from a record sequence and checks it against
//! the logged values to the unit.

use crate::error::{Error, Result};
use crate::flops::CostModel;
use crate::harness::record::{Level, RunRecord};
use crate::model::ModelConfig;

/// Walks the records in order, charging the fine or coarse step cost per
/// record, and verifies the running total matches `cumulative_flops`
/// exactly and increases strictly. Returns the recomputed total.
pub fn audit_flops(
    records: &[RunRecord],
    model: &ModelConfig,
    tokens_per_step: u64,
) -> Result<u64> {
    let cost = CostModel::new(model, tokens_per_step);
    let mut total = 0u64;
    let mut previous = 0u64;
    for (i, record) in records.iter().enumerate() {
        total += match record.level {
            Level::Fine => cost.fine_step,
            Level::CoarseEven | Level::CoarseOdd => cost.coarse_step,
        };
        if record.cumulative_flops != total {
            return Err(Error::Contract(format!(
                "record {i} (step {}, {:?}): logged {} flops, recomputed {total}",
                record.step, record.level, record.cumulative_flops
            )));
        }
        if record.cumulative_flops <= previous {
            return Err(Error::Contract(format!(
                "record {i}: cumulative flops not strictly increasing"
            )));
        }
        previous = record.cumulative_flops;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::train_step_flops;

    fn record(step: usize, level: Level, cumulative_flops: u64) -> RunRecord {
        RunRecord {
            step,
            level,
            inner_step: 0,
            loss: 1.0,
            lr: 1e-3,
            cumulative_flops,
            tokens_seen: 0,
            seed: 0,
            wall_ms: 0,
        }
    }

    #[test]
    fn audit_accepts_consistent_log_and_rejects_drift() {
        let cfg = ModelConfig::desk();
        let tokens = 1024;
        let fine = train_step_flops(&cfg, tokens);
        let coarse = train_step_flops(&cfg.coarse(), tokens);
        let records = vec![
            record(1, Level::Fine, fine),
            record(1, Level::CoarseEven, fine + coarse),
            record(1, Level::CoarseOdd, fine + 2 * coarse),
            record(2, Level::Fine, 2 * fine + 2 * coarse),
        ];
        assert_eq!(
            audit_flops(&records, &cfg, tokens).unwrap(),
            2 * fine + 2 * coarse
        );

        let mut bad = records;
        bad[2].cumulative_flops += 1;
        assert!(audit_flops(&bad, &cfg, tokens).is_err());
    }
}
