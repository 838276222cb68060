//! Half-depth coarse models by block parity, and the parameter transfer back
//! to the fine model.
//!
//! A coarse model aliases every second block of the fine model (no copied
//! storage), shares its embedding and position tables, and is trained as an
//! ordinary model. Afterwards the blocks that were not trained are moved
//! toward their trained neighbor: with blend weight `delta`, the block
//! following each coarse-owned block becomes
//! `(1-delta) * old + delta * trained_neighbor`, where `old` is the value
//! snapshotted when the phase began. The first block stays untouched in the
//! even phase; one full cycle trains the even-numbered and the odd-numbered
//! blocks exactly once each.
//!
//! Block numbering below follows the 1-based convention: "even" means blocks
//! 2, 4, ..., N, which live at odd 0-based indices.

use serde::{Deserialize, Serialize};

use crate::data::{BatchCursor, TokenStream};
use crate::error::{Error, Result};
use crate::flops::{train_step_flops, FlopMeter};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::step::optimization_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    /// Coarse slot i aliases fine block 2i (1-based): blocks 2, 4, ..., N.
    Even,
    /// Coarse slot i aliases fine block 2i-1 (1-based): blocks 1, 3, ..., N-1.
    Odd,
}

impl Parity {
    pub fn opposite(self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    /// 0-based fine block indices aliased by this parity.
    pub fn fine_indices(self, num_blocks: usize) -> Vec<usize> {
        let first = match self {
            Parity::Even => 1,
            Parity::Odd => 0,
        };
        (first..num_blocks).step_by(2).collect()
    }

    pub fn level_name(self) -> &'static str {
        match self {
            Parity::Even => "COARSE_EVEN",
            Parity::Odd => "COARSE_ODD",
        }
    }
}

/// A half-depth model whose blocks are aliases into a fine model.
pub struct CoarseView<S: Scalar> {
    pub params: ModelParams<S>,
    pub parity: Parity,
}

/// Builds the parity-selected coarse model. Block slots and the
/// embedding/position tables alias fine storage; nothing is copied.
pub fn make_coarse_view<S: Scalar>(fine: &ModelParams<S>, parity: Parity) -> Result<CoarseView<S>> {
    let n = fine.config.num_blocks;
    if n % 2 != 0 {
        return Err(Error::Config(format!(
            "coarse views need an even number of fine blocks, got {n}"
        )));
    }
    let blocks = parity
        .fine_indices(n)
        .into_iter()
        .map(|i| fine.blocks[i].alias())
        .collect();
    Ok(CoarseView {
        params: ModelParams {
            config: fine.config.coarse(),
            token_embedding: fine.token_embedding.clone(),
            position_embedding: fine.position_embedding.clone(),
            blocks,
        },
        parity,
    })
}

/// Deep copy of the blocks a coarse phase will *not* train, taken before the
/// phase so the blend has well-defined "old" values.
pub struct BlockSnapshot<S> {
    parity: Parity,
    /// (0-based fine index, data of the six block tensors in order)
    blocks: Vec<(usize, Vec<Vec<S>>)>,
}

impl<S: Scalar> BlockSnapshot<S> {
    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn block(&self, fine_index: usize) -> Option<&Vec<Vec<S>>> {
        self.blocks
            .iter()
            .find(|(i, _)| *i == fine_index)
            .map(|(_, data)| data)
    }
}

pub fn snapshot_opposite_parity<S: Scalar>(
    fine: &ModelParams<S>,
    parity: Parity,
) -> BlockSnapshot<S> {
    let blocks = parity
        .opposite()
        .fine_indices(fine.config.num_blocks)
        .into_iter()
        .map(|i| (i, fine.blocks[i].snapshot()))
        .collect();
    BlockSnapshot { parity, blocks }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProlongationSpec {
    /// Blend weight in [0, 1] toward the trained neighbor.
    pub delta: f64,
}

impl ProlongationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Transfers a trained coarse phase into the fine model: aliased blocks
/// already hold their trained values; each block following an aliased block
/// becomes `(1-delta) * snapshot + delta * trained_neighbor`. Indices past
/// the last block are skipped, so in the even phase block 1 is never
/// written. Embedding and position tables are untouched here (they were
/// trained directly through the view).
pub fn prolongate<S: Scalar>(
    fine: &ModelParams<S>,
    parity: Parity,
    snapshot: &BlockSnapshot<S>,
    spec: &ProlongationSpec,
) -> Result<()> {
    spec.validate()?;
    if snapshot.parity() != parity {
        return Err(Error::Contract(format!(
            "snapshot was taken for the {:?} phase, prolongating {:?}",
            snapshot.parity(),
            parity
        )));
    }
    let n = fine.config.num_blocks;
    let delta = S::from_f64(spec.delta);
    let keep = S::one() - delta;
    for src in parity.fine_indices(n) {
        let tgt = src + 1;
        if tgt >= n {
            continue;
        }
        let old = snapshot.block(tgt).ok_or_else(|| {
            Error::Contract(format!("snapshot is missing fine block {tgt}"))
        })?;
        let src_block = &fine.blocks[src];
        let tgt_block = &fine.blocks[tgt];
        for (k, (_, tgt_t)) in tgt_block.tensors().into_iter().enumerate() {
            let (_, src_t) = src_block.tensors()[k];
            let old_data = &old[k];
            if old_data.len() != tgt_t.numel() || src_t.numel() != tgt_t.numel() {
                return Err(Error::Contract(format!(
                    "snapshot shape mismatch at block {tgt} tensor {k}"
                )));
            }
            if spec.delta == 0.0 {
                tgt_t.set_data(old_data);
            } else if spec.delta == 1.0 {
                let src_data = src_t.to_vec();
                tgt_t.set_data(&src_data);
            } else {
                let src_data = src_t.data();
                let mut out = tgt_t.data_mut();
                for i in 0..out.len() {
                    out[i] = keep * old_data[i] + delta * src_data[i];
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelSchedule {
    /// Leading fine steps that are each followed by a full coarse cycle.
    pub num_cycles: usize,
    /// SGD steps per coarse model inside one cycle.
    pub coarse_steps_per_model: usize,
    pub delta: f64,
    /// Constant learning rate for coarse training.
    pub coarse_lr: f64,
    /// When true, coarse phases replay the batches the fine level is about
    /// to consume instead of advancing the shared stream.
    pub replay_fine_batches: bool,
}

impl MultilevelSchedule {
    /// The schedule of the reference experiment: 35 cycles of 100 coarse
    /// steps per model, delta 0.25, constant coarse lr 1.2e-3.
    pub fn reference() -> Self {
        MultilevelSchedule {
            num_cycles: 35,
            coarse_steps_per_model: 100,
            delta: 0.25,
            coarse_lr: 1.2e-3,
            replay_fine_batches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ProlongationSpec { delta: self.delta }.validate()?;
        if !(self.coarse_lr > 0.0) {
            return Err(Error::Config(format!(
                "coarse_lr must be positive, got {}",
                self.coarse_lr
            )));
        }
        Ok(())
    }
}

/// Everything a caller needs to log one coarse optimization step.
#[derive(Debug, Clone)]
pub struct CoarseStepInfo {
    pub parity: Parity,
    pub inner_step: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_tokens: u64,
    pub cumulative_flops: u64,
}

/// One full coarse cycle: snapshot, train and prolongate the even-parity
/// model, then the same for the odd-parity model. Every coarse step consumes
/// the same token budget as a fine step and charges the coarse step cost to
/// the meter. No gradient state crosses levels: each step builds its own
/// tape and the views' gradients are consumed by their own updates.
#[allow(clippy::too_many_arguments)]
pub fn run_coarse_cycle<S: Scalar>(
    fine: &ModelParams<S>,
    schedule: &MultilevelSchedule,
    stream: &TokenStream,
    cursor: &mut BatchCursor,
    accumulation: usize,
    meter: &mut FlopMeter,
    on_step: &mut dyn FnMut(CoarseStepInfo) -> Result<()>,
) -> Result<()> {
    if schedule.coarse_steps_per_model == 0 {
        return Ok(());
    }
    let tokens_per_step = (cursor.batch * cursor.seq * accumulation) as u64;
    let coarse_cost = train_step_flops(&fine.config.coarse(), tokens_per_step);
    let spec = ProlongationSpec {
        delta: schedule.delta,
    };

    for parity in [Parity::Even, Parity::Odd] {
        let snapshot = snapshot_opposite_parity(fine, parity);
        let view = make_coarse_view(fine, parity)?;
        let named = view.params.named_tensors();

        let mut forked;
        let phase_cursor: &mut BatchCursor = if schedule.replay_fine_batches {
            forked = cursor.clone();
            &mut forked
        } else {
            &mut *cursor
        };

        for inner in 1..=schedule.coarse_steps_per_model {
            let loss = optimization_step(
                &view.params,
                &named,
                phase_cursor,
                stream,
                accumulation,
                schedule.coarse_lr,
            )?;
            let cumulative = meter.add(coarse_cost)?;
            on_step(CoarseStepInfo {
                parity,
                inner_step: inner,
                loss,
                lr: schedule.coarse_lr,
                batch_tokens: tokens_per_step,
                cumulative_flops: cumulative,
            })?;
        }
        prolongate(fine, parity, &snapshot, &spec)?;
    }
    Ok(())
}
