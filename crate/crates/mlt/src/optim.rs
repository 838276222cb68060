//! Plain SGD with gradient accumulation and the two learning-rate schedules
//! used by the training loops: linear warmup followed by cosine decay for the
//! fine level, constant for the coarse level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// Linear ramp from 0 at step 0 to `lr_max` at `warmup_steps`, then a
    /// cosine from `lr_max` down to `lr_min` at `total_steps`. Set
    /// `lr_min = 0` to decay all the way to zero.
    WarmupCosine {
        warmup_steps: usize,
        total_steps: usize,
        lr_max: f64,
        lr_min: f64,
    },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
                lr_max,
                lr_min,
            } => {
                if !(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max {
                    return Err(Error::Config(format!(
                        "need 0 <= lr_min <= lr_max and lr_max > 0, got {lr_min} and {lr_max}"
                    )));
                }
                if warmup_steps >= total_steps {
                    return Err(Error::Config(format!(
                        "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
                    )));
                }
                Ok(())
            }
            LrSchedule::Constant { lr } => {
                if !(lr > 0.0) {
                    return Err(Error::Config(format!("constant lr must be positive, got {lr}")));
                }
                Ok(())
            }
        }
    }

    /// Learning rate at `step`. For the cosine schedule, `step` may be at
    /// most `total_steps`; the value there is exactly `lr_min`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match *self {
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
                lr_max,
                lr_min,
            } => {
                if step > total_steps {
                    return Err(Error::ScheduleExhausted {
                        step,
                        total: total_steps,
                    });
                }
                if warmup_steps > 0 && step <= warmup_steps {
                    return Ok(lr_max * step as f64 / warmup_steps as f64);
                }
                let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: LrSchedule,
    /// Micro-batches accumulated (gradients averaged) per optimization step.
    pub accumulation_factor: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation_factor == 0 {
            return Err(Error::Config("accumulation_factor must be >= 1".into()));
        }
        self.schedule.validate()
    }
}

/// Multiplies every stored gradient by `c` (averaging accumulated
/// micro-batch gradients before a step).
pub fn scale_grads<S: Scalar>(params: &[(String, Tensor<S>)], c: S) {
    for (_, t) in params {
        t.scale_grad(c);
    }
}

/// `theta -= lr * grad` for every parameter, then zeroes the gradients.
/// Nothing is modified if any gradient entry is non-finite, and a tensor's
/// update is rejected wholesale if it would leave a non-finite parameter.
pub fn sgd_step<S: Scalar>(params: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
    for (name, t) in params {
        if let Some(g) = t.grad_vec() {
            if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "sgd_step",
                    detail: format!("non-finite gradient in {name}[{idx}]"),
                });
            }
        }
    }
    let lr_s = S::from_f64(lr);
    for (name, t) in params {
        if let Err(idx) = t.sgd_apply(lr_s) {
            return Err(Error::Numeric {
                op: "sgd_step",
                detail: format!("non-finite update in {name}[{idx}]"),
            });
        }
    }
    Ok(())
}
