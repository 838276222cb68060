//! One SGD optimization step with gradient accumulation, shared by the
//! single-level loop and the coarse-model training phases.

use crate::data::{BatchCursor, TokenStream};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{scale_grads, sgd_step};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Pulls `accumulation` micro-batches from the cursor, accumulates their
/// gradients, averages, and applies one SGD update at `lr`. Returns the mean
/// micro-batch loss. Parameters are untouched if a loss or gradient is
/// non-finite.
pub fn optimization_step<S: Scalar>(
    params: &ModelParams<S>,
    named: &[(String, Tensor<S>)],
    cursor: &mut BatchCursor,
    stream: &TokenStream,
    accumulation: usize,
    lr: f64,
) -> Result<f64> {
    debug_assert!(accumulation >= 1);
    let mut loss_sum = 0.0f64;
    for _ in 0..accumulation {
        let batch = cursor.next_batch(stream)?;
        let tape = Tape::new();
        let loss = params.loss(&tape, &batch.inputs, &batch.targets, batch.seq)?;
        let value = loss.item().to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "optimization_step",
                detail: format!("non-finite loss {value}"),
            });
        }
        tape.backward(&loss)?;
        loss_sum += value;
    }
    scale_grads(named, S::from_f64(1.0 / accumulation as f64));
    sgd_step(named, lr)?;
    Ok(loss_sum / accumulation as f64)
}
