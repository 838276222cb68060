//! Closed-form FLOP cost model for forward passes and training steps.
//!
//! Parameter matmuls are counted at 2 FLOPs per multiply-add over the active
//! matrix parameters (block weights plus the tied output projection) and
//! attention score/value products at the full context length as an upper
//! bound. Embedding lookups and the position-table add are table reads and
//! count as zero. A training step is priced at three forward passes.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// FLOPs for one forward pass over `tokens` tokens.
pub fn forward_flops(config: &ModelConfig, tokens: u64) -> u64 {
    let d = config.embed_dim as u64;
    let n = config.num_blocks as u64;
    let v = config.vocab_size as u64;
    let s = config.context_length as u64;
    let matrix_params = n * config.block_param_count() + v * d;
    tokens * (2 * matrix_params + 4 * n * s * d)
}

/// FLOPs for one training step: exactly three forward passes.
pub fn train_step_flops(config: &ModelConfig, tokens: u64) -> u64 {
    3 * forward_flops(config, tokens)
}

/// Per-step costs for the fine model and its half-depth coarse model at a
/// fixed token budget per optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub tokens_per_step: u64,
    pub fine_step: u64,
    pub coarse_step: u64,
}

impl CostModel {
    pub fn new(config: &ModelConfig, tokens_per_step: u64) -> Self {
        CostModel {
            tokens_per_step,
            fine_step: train_step_flops(config, tokens_per_step),
            coarse_step: train_step_flops(&config.coarse(), tokens_per_step),
        }
    }
}

/// Strictly increasing cumulative FLOP counter.
#[derive(Debug, Default, Clone)]
pub struct FlopMeter {
    total: u64,
}

impl FlopMeter {
    pub fn new() -> Self {
        FlopMeter { total: 0 }
    }

    pub fn add(&mut self, flops: u64) -> Result<u64> {
        if flops == 0 {
            return Err(Error::Contract(
                "FLOP meter increments must be positive".into(),
            ));
        }
        self.total += flops;
        Ok(self.total)
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            context_length: 4,
            embed_dim: 4,
            num_blocks: 2,
            num_heads: 2,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    #[test]
    fn formula_evaluation() {
        // 4 * (2*(12*2*16 + 8*4) + 4*2*4*4) = 4 * (832 + 128) = 3840
        assert_eq!(forward_flops(&small(), 4), 3840);
        assert_eq!(train_step_flops(&small(), 4), 11520);
    }

    #[test]
    fn linear_in_tokens() {
        let cfg = small();
        assert_eq!(forward_flops(&cfg, 8), 2 * forward_flops(&cfg, 4));
        assert_eq!(forward_flops(&cfg, 4000), 1000 * forward_flops(&cfg, 4));
    }

    #[test]
    fn train_step_is_three_forwards() {
        for cfg in [small(), ModelConfig::desk(), ModelConfig::reference()] {
            for tokens in [1u64, 17, 262_144] {
                assert_eq!(train_step_flops(&cfg, tokens), 3 * forward_flops(&cfg, tokens));
            }
        }
    }

    #[test]
    fn reference_step_cost_exact() {
        let cfg = ModelConfig::reference();
        // per token: 2*(12*12*256^2 + 50257*256) + 4*12*256*256 = 47,751,680
        assert_eq!(forward_flops(&cfg, 1), 47_751_680);
        assert_eq!(train_step_flops(&cfg, 262_144), 37_553_449_205_760);
    }

    #[test]
    fn coarse_cost_ratio_bounds() {
        for cfg in [ModelConfig::desk(), ModelConfig::reference()] {
            let cost = CostModel::new(&cfg, 262_144);
            assert!(cost.coarse_step < cost.fine_step);
            let ratio = cost.coarse_step as f64 / cost.fine_step as f64;
            // halving the blocks halves everything except the shared
            // embedding projection term
            assert!(ratio > 0.5 && ratio < 1.0, "ratio {ratio}");
        }
    }

    #[test]
    fn meter_is_strictly_monotonic() {
        let mut meter = FlopMeter::new();
        let a = meter.add(10).unwrap();
        let b = meter.add(1).unwrap();
        assert!(b > a);
        assert!(meter.add(0).is_err());
        assert_eq!(meter.total(), 11);
    }
}
