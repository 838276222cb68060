//! Baseline-versus-multilevel comparison: loss per step, loss per FLOP, and
//! the compute each method needed to first reach the baseline's final loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::aggregate::Summary;

/// FLOP reduction reported for this method's original 16000-step experiment,
/// printed as reference metadata next to measured savings.
pub const REFERENCE_SAVINGS: f64 = 0.44;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReach {
    /// Mean cumulative FLOPs at the first step whose mean loss is at or
    /// below the target; absent when the target is never reached.
    pub flops_to_target: Option<f64>,
    pub step_to_target: Option<usize>,
    /// Best (lowest) mean loss and where it occurred, for "not reached"
    /// reporting.
    pub closest_loss: f64,
    pub closest_loss_flops: f64,
    pub total_flops: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    /// The baseline's final mean loss.
    pub target_loss: f64,
    pub baseline: MethodReach,
    pub multilevel: MethodReach,
    /// `1 - flops_ml / flops_sl` over the first-reach FLOPs; absent when the
    /// multilevel curve never reaches the target.
    pub savings: Option<f64>,
    /// Reference-scale figure, metadata only; not measured here.
    pub reference_savings: f64,
    /// (step, baseline mean loss, multilevel mean loss)
    pub loss_vs_step: Vec<(usize, f64, f64)>,
    /// (mean cumulative FLOPs, mean loss) per method
    pub loss_vs_flops_baseline: Vec<(f64, f64)>,
    pub loss_vs_flops_multilevel: Vec<(f64, f64)>,
}

fn reach(summary: &Summary, target: f64) -> MethodReach {
    let n = summary.steps.len();
    let mut first: Option<usize> = None;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let loss = summary.loss_mean[i];
        if first.is_none() && loss <= target {
            first = Some(i);
        }
        if loss < best.0 {
            best = (loss, i);
        }
    }
    MethodReach {
        flops_to_target: first.map(|i| summary.flops_mean[i]),
        step_to_target: first.map(|i| summary.steps[i]),
        closest_loss: best.0,
        closest_loss_flops: summary.flops_mean[best.1],
        total_flops: *summary.flops_mean.last().unwrap(),
        final_loss: *summary.loss_mean.last().unwrap(),
    }
}

pub fn compare(baseline: &Summary, multilevel: &Summary) -> Result<CompareReport> {
    if baseline.steps.is_empty() || multilevel.steps.is_empty() {
        return Err(Error::Input("summaries must cover completed runs".into()));
    }
    let target = *baseline.loss_mean.last().unwrap();
    let base_reach = reach(baseline, target);
    let ml_reach = reach(multilevel, target);
    let savings = match (base_reach.flops_to_target, ml_reach.flops_to_target) {
        (Some(sl), Some(ml)) => Some(1.0 - ml / sl),
        _ => None,
    };

    let loss_vs_step = baseline
        .steps
        .iter()
        .zip(&baseline.loss_mean)
        .filter_map(|(&s, &b)| {
            multilevel
                .steps
                .iter()
                .position(|&ms| ms == s)
                .map(|i| (s, b, multilevel.loss_mean[i]))
        })
        .collect();
    let curve = |s: &Summary| {
        s.flops_mean
            .iter()
            .zip(&s.loss_mean)
            .map(|(&f, &l)| (f, l))
            .collect()
    };

    Ok(CompareReport {
        target_loss: target,
        baseline: base_reach,
        multilevel: ml_reach,
        savings,
        reference_savings: REFERENCE_SAVINGS,
        loss_vs_step,
        loss_vs_flops_baseline: curve(baseline),
        loss_vs_flops_multilevel: curve(multilevel),
    })
}

/// Human-readable digest of a report.
pub fn render_text(report: &CompareReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("target loss (baseline final mean): {:.6}\n", report.target_loss));
    out.push_str(&format!(
        "baseline:   total {:.4e} FLOPs, final loss {:.6}\n",
        report.baseline.total_flops, report.baseline.final_loss
    ));
    out.push_str(&format!(
        "multilevel: total {:.4e} FLOPs, final loss {:.6}\n",
        report.multilevel.total_flops, report.multilevel.final_loss
    ));
    match (
        report.baseline.flops_to_target,
        report.multilevel.flops_to_target,
    ) {
        (Some(sl), Some(ml)) => {
            out.push_str(&format!(
                "FLOPs to reach target: baseline {:.4e} (step {}), multilevel {:.4e} (step {})\n",
                sl,
                report.baseline.step_to_target.unwrap(),
                ml,
                report.multilevel.step_to_target.unwrap()
            ));
            out.push_str(&format!(
                "measured savings: {:.1}%\n",
                100.0 * report.savings.unwrap()
            ));
        }
        (_, None) => {
            out.push_str(&format!(
                "multilevel never reached the target; closest loss {:.6} at {:.4e} FLOPs\n",
                report.multilevel.closest_loss, report.multilevel.closest_loss_flops
            ));
        }
        (None, _) => {
            out.push_str("baseline summary never reaches its own final loss (empty?)\n");
        }
    }
    out.push_str(&format!(
        "reference-scale savings (metadata, not measured here): {:.0}%\n",
        100.0 * report.reference_savings
    ));
    out
}
