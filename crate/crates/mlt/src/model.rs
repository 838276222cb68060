//! Decoder-only transformer with pre-norm residual blocks and tied
//! input/output embeddings.
//!
//! Each block computes `x + SA(LN(x))` followed by `+ FF(LN(of that sum))`,
//! so a block with all-zero weights is exactly the identity map on `x`.
//! Parameters are bias-free and layer norm carries no gain/bias, which makes
//! the parameter count `V*d + S*d + N*12*d^2` at the default FF multiplier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// FF hidden width as a multiple of `embed_dim`.
    pub ff_multiplier: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// The reference configuration: 50257-token vocabulary, 256-token
    /// context, width 256, 12 blocks of 8 heads (22,368,512 parameters).
    pub fn reference() -> Self {
        ModelConfig {
            vocab_size: 50257,
            context_length: 256,
            embed_dim: 256,
            num_blocks: 12,
            num_heads: 8,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    /// Laptop-sized default: byte vocabulary, width 128, 12 blocks.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 256,
            context_length: 128,
            embed_dim: 128,
            num_blocks: 12,
            num_heads: 8,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.context_length == 0
            || self.embed_dim == 0
            || self.num_blocks == 0
            || self.num_heads == 0
            || self.ff_multiplier == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_blocks % 2 != 0 {
            return Err(Error::Config(format!(
                "num_blocks must be even to admit half-depth coarse models, got {}",
                self.num_blocks
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Same architecture at half depth, sharing everything else.
    pub fn coarse(&self) -> ModelConfig {
        ModelConfig {
            num_blocks: self.num_blocks / 2,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_multiplier * self.embed_dim
    }

    /// Parameters per block: 4 attention matrices + 2 FF matrices.
    pub fn block_param_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        (4 + 2 * self.ff_multiplier as u64) * d * d
    }

    /// Total parameter elements: embeddings (output projection is tied, so
    /// counted once), position table, and the blocks.
    pub fn param_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        self.vocab_size as u64 * d
            + self.context_length as u64 * d
            + self.num_blocks as u64 * self.block_param_count()
    }
}

pub struct BlockParams<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub w_ff1: Tensor<S>,
    pub w_ff2: Tensor<S>,
}

impl<S: Scalar> BlockParams<S> {
    pub fn tensors(&self) -> [(&'static str, &Tensor<S>); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_ff1", &self.w_ff1),
            ("w_ff2", &self.w_ff2),
        ]
    }

    /// Handle-level alias of this block: same storage, no copies.
    pub fn alias(&self) -> BlockParams<S> {
        BlockParams {
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_o: self.w_o.clone(),
            w_ff1: self.w_ff1.clone(),
            w_ff2: self.w_ff2.clone(),
        }
    }

    /// Deep copy of the block's current values.
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.tensors().iter().map(|(_, t)| t.to_vec()).collect()
    }
}

pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    /// Token embedding; also the output projection (one storage, two uses).
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic Gaussian init: N(0, 0.02^2) everywhere, with the
    /// residual-writing matrices (`w_o`, `w_ff2`) scaled by 1/sqrt(2N).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |shape: Vec<usize>, std: f64| -> Result<Tensor<S>> {
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    S::from_f64(z * std)
                })
                .collect();
            Tensor::param(shape, data)
        };

        let d = config.embed_dim;
        let std = 0.02;
        let residual_std = 0.02 / (2.0 * config.num_blocks as f64).sqrt();

        let token_embedding = sample(vec![config.vocab_size, d], std)?;
        let position_embedding = sample(vec![config.context_length, d], std)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            blocks.push(BlockParams {
                w_q: sample(vec![d, d], std)?,
                w_k: sample(vec![d, d], std)?,
                w_v: sample(vec![d, d], std)?,
                w_o: sample(vec![d, d], residual_std)?,
                w_ff1: sample(vec![d, config.ff_dim()], std)?,
                w_ff2: sample(vec![config.ff_dim(), d], residual_std)?,
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    /// All parameter tensors with stable dotted names, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.clone()),
            (
                "position_embedding".to_string(),
                self.position_embedding.clone(),
            ),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.tensors() {
                out.push((format!("blocks.{i}.{name}"), t.clone()));
            }
        }
        out
    }

    /// Total allocated parameter elements (aliased tensors counted once).
    pub fn param_element_count(&self) -> u64 {
        let mut seen = std::collections::HashSet::new();
        let mut total = 0u64;
        for (_, t) in self.named_tensors() {
            if seen.insert(t.storage_ptr()) {
                total += t.numel() as u64;
            }
        }
        total
    }

    /// Logits for `tokens.len()/seq` packed sequences of length `seq`.
    /// Output is `(tokens.len()) x vocab`.
    pub fn forward(&self, tape: &Tape<S>, tokens: &[u32], seq: usize) -> Result<Tensor<S>> {
        let cfg = &self.config;
        if seq == 0 || tokens.is_empty() || tokens.len() % seq != 0 {
            return Err(Error::Input(format!(
                "token count {} is not a multiple of sequence length {seq}",
                tokens.len()
            )));
        }
        if seq > cfg.context_length {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds context length {}",
                cfg.context_length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary ({})",
                cfg.vocab_size
            )));
        }
        let batch = tokens.len() / seq;
        let pos_ids: Vec<u32> = (0..batch)
            .flat_map(|_| 0..seq as u32)
            .collect();

        let eps = S::from_f64(cfg.layer_norm_eps);
        let tok = tape.embedding(&self.token_embedding, tokens)?;
        let pos = tape.embedding(&self.position_embedding, &pos_ids)?;
        let mut x = tape.add(&tok, &pos)?;

        for block in &self.blocks {
            let normed = tape.layer_norm(&x, eps)?;
            let attn = tape.causal_self_attention(
                &normed,
                &block.w_q,
                &block.w_k,
                &block.w_v,
                &block.w_o,
                cfg.num_heads,
                seq,
            )?;
            x = tape.add(&x, &attn)?;
            let normed2 = tape.layer_norm(&x, eps)?;
            let h = tape.matmul(&normed2, &block.w_ff1)?;
            let h = tape.gelu(&h);
            let ff = tape.matmul(&h, &block.w_ff2)?;
            x = tape.add(&x, &ff)?;
        }

        let x = tape.layer_norm(&x, eps)?;
        tape.matmul_tb(&x, &self.token_embedding)
    }

    /// Mean cross-entropy of next-token prediction over all positions.
    pub fn loss(
        &self,
        tape: &Tape<S>,
        tokens: &[u32],
        targets: &[u32],
        seq: usize,
    ) -> Result<Tensor<S>> {
        let logits = self.forward(tape, tokens, seq)?;
        tape.cross_entropy(&logits, targets)
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            context_length: 8,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    #[test]
    fn param_count_matches_reference_architecture() {
        let cfg = ModelConfig::reference();
        assert_eq!(cfg.param_count(), 22_368_512);
        assert_eq!(cfg.coarse().param_count(), 17_649_920);
    }

    #[test]
    fn param_count_small_formula() {
        let cfg = ModelConfig {
            vocab_size: 8,
            context_length: 4,
            embed_dim: 4,
            num_blocks: 2,
            num_heads: 2,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        };
        // 8*4 + 4*4 + 2*12*16 = 432
        assert_eq!(cfg.param_count(), 432);
    }

    #[test]
    fn param_count_matches_allocated_elements() {
        for cfg in [tiny_config(), ModelConfig::desk()] {
            let params = ModelParams::<f32>::init(&cfg, 7).unwrap();
            assert_eq!(params.param_element_count(), cfg.param_count());
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let c = ModelParams::<f32>::init(&cfg, 4).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let differs = a
            .named_tensors()
            .iter()
            .zip(c.named_tensors().iter())
            .any(|((_, ta), (_, tc))| ta.to_vec() != tc.to_vec());
        assert!(differs);
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = ModelConfig {
            vocab_size: 256,
            ..tiny_config()
        };
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let logits = params.forward(&tape, &[1, 2, 3, 4, 5], 5).unwrap();
        assert_eq!(logits.shape(), vec![5, 256]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            params.forward(&tape, &[99], 1),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            params.forward(&tape, &[0; 9], 9),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_blocks_reduce_to_embedding_pipeline() {
        // With all block weights zero each block is the identity, so the
        // logits must equal layer_norm(tok+pos) ⋅ embeddingᵀ.
        let cfg = tiny_config();
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        for block in &params.blocks {
            for (_, t) in block.tensors() {
                let n = t.numel();
                t.set_data(&vec![0.0; n]);
            }
        }
        let tokens = [3u32, 0, 15, 7];
        let tape = Tape::new();
        let logits = params.forward(&tape, &tokens, 4).unwrap();

        // independent pipeline on plain vectors
        let d = cfg.embed_dim;
        let emb = params.token_embedding.to_vec();
        let pos = params.position_embedding.to_vec();
        let mut x = vec![0.0f64; tokens.len() * d];
        for (t, &id) in tokens.iter().enumerate() {
            for j in 0..d {
                x[t * d + j] = emb[id as usize * d + j] + pos[t * d + j];
            }
        }
        let mut expected = vec![0.0f64; tokens.len() * cfg.vocab_size];
        for t in 0..tokens.len() {
            let row = &x[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + cfg.layer_norm_eps).sqrt();
            let normed: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
            for v in 0..cfg.vocab_size {
                expected[t * cfg.vocab_size + v] = normed
                    .iter()
                    .zip(&emb[v * d..(v + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let got = logits.to_vec();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn causality_perturbation() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let seq = 8;
        let base: Vec<u32> = (0..seq as u32).collect();
        let tape = Tape::new();
        let baseline = params.forward(&tape, &base, seq).unwrap().to_vec();
        let vocab = cfg.vocab_size;
        for j in 0..seq {
            let mut perturbed = base.clone();
            perturbed[j] = (perturbed[j] + 9) % vocab as u32;
            let tape = Tape::new();
            let out = params.forward(&tape, &perturbed, seq).unwrap().to_vec();
            for t in 0..j {
                assert_eq!(
                    baseline[t * vocab..(t + 1) * vocab],
                    out[t * vocab..(t + 1) * vocab],
                    "position {t} changed after perturbing {j}"
                );
            }
            let changed = (j..seq)
                .any(|t| baseline[t * vocab..(t + 1) * vocab] != out[t * vocab..(t + 1) * vocab]);
            assert!(changed, "perturbing {j} changed nothing");
        }
    }

    #[test]
    fn tied_embedding_is_single_storage() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let tokens = [1u32, 2];
        let tape = Tape::new();
        let before = params.forward(&tape, &tokens, 2).unwrap().to_vec();
        // mutate the embedding through a second handle; logits must change
        // through the output projection as well
        let alias = params.token_embedding.clone();
        {
            let mut d = alias.data_mut();
            for v in d.iter_mut() {
                *v *= 2.0;
            }
        }
        let tape = Tape::new();
        let after = params.forward(&tape, &tokens, 2).unwrap().to_vec();
        assert_ne!(before, after);
        assert_eq!(
            params.param_element_count(),
            cfg.param_count(),
            "a second embedding copy exists"
        );
    }

    #[test]
    fn gradient_reaches_every_block() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let tokens = [1u32, 2, 3, 4, 5, 6, 7, 8];
        let targets = [2u32, 3, 4, 5, 6, 7, 8, 9];
        let tape = Tape::new();
        let loss = params.loss(&tape, &tokens, &targets, 8).unwrap();
        tape.backward(&loss).unwrap();
        for (name, t) in params.named_tensors() {
            let g = t.grad_vec().unwrap_or_default();
            let norm: f32 = g.iter().map(|v| v * v).sum::<f32>();
            assert!(norm > 0.0, "no gradient in {name}");
        }
    }

    #[test]
    fn initial_loss_near_uniform() {
        let cfg = ModelConfig {
            vocab_size: 256,
            context_length: 16,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        };
        let params = ModelParams::<f32>::init(&cfg, 9).unwrap();
        let tokens: Vec<u32> = (0..64u32).map(|i| (i * 37) % 256).collect();
        let targets: Vec<u32> = (0..64u32).map(|i| (i * 53 + 11) % 256).collect();
        let tape = Tape::new();
        let loss = params.loss(&tape, &tokens, &targets, 16).unwrap().item() as f64;
        let uniform = 256f64.ln();
        assert!(
            (loss - uniform).abs() / uniform < 0.10,
            "initial loss {loss} not within 10% of {uniform}"
        );
    }
}
