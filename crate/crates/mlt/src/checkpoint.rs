//! Binary checkpoints: an 8-byte magic, fixed-width header (version, dtype,
//! architecture fields), then the raw little-endian parameter arrays in
//! declaration order, plus a text manifest alongside.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{BlockParams, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MLTCKPT1";
const VERSION: u32 = 1;

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.txt", checkpoint.display()))
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, seed: u64, path: &Path) -> Result<()> {
    let cfg = &params.config;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&S::DTYPE_BYTES.to_le_bytes());
    for field in [
        cfg.vocab_size,
        cfg.context_length,
        cfg.embed_dim,
        cfg.num_blocks,
        cfg.num_heads,
        cfg.ff_multiplier,
    ] {
        buf.extend_from_slice(&(field as u64).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.layer_norm_eps.to_le_bytes());
    for (_, t) in params.named_tensors() {
        for &v in t.data().iter() {
            v.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;

    let mut manifest = String::new();
    manifest.push_str(&format!("vocab_size = {}\n", cfg.vocab_size));
    manifest.push_str(&format!("context_length = {}\n", cfg.context_length));
    manifest.push_str(&format!("embed_dim = {}\n", cfg.embed_dim));
    manifest.push_str(&format!("num_blocks = {}\n", cfg.num_blocks));
    manifest.push_str(&format!("num_heads = {}\n", cfg.num_heads));
    manifest.push_str(&format!("ff_multiplier = {}\n", cfg.ff_multiplier));
    manifest.push_str(&format!("layer_norm_eps = {}\n", cfg.layer_norm_eps));
    manifest.push_str(&format!("seed = {seed}\n"));
    manifest.push_str(&format!("dtype_bytes = {}\n", S::DTYPE_BYTES));
    manifest.push_str(&format!("param_count = {}\n", cfg.param_count()));
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 8 + 4 + 4 + 48 + 8 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let mut off = 8;
    let read_u32 = |off: &mut usize| -> u32 {
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        v
    };
    let version = read_u32(&mut off);
    let dtype = read_u32(&mut off);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    if dtype != S::DTYPE_BYTES {
        return Err(fail(&format!(
            "dtype width {dtype} does not match requested {}",
            S::DTYPE_BYTES
        )));
    }
    let read_u64 = |off: &mut usize| -> u64 {
        let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        v
    };
    let cfg = ModelConfig {
        vocab_size: read_u64(&mut off) as usize,
        context_length: read_u64(&mut off) as usize,
        embed_dim: read_u64(&mut off) as usize,
        num_blocks: read_u64(&mut off) as usize,
        num_heads: read_u64(&mut off) as usize,
        ff_multiplier: read_u64(&mut off) as usize,
        layer_norm_eps: f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()),
    };
    off += 8;

    let expected = cfg.param_count() as usize * S::DTYPE_BYTES as usize;
    if bytes.len() - off != expected {
        return Err(fail(&format!(
            "payload is {} bytes, architecture needs {expected}",
            bytes.len() - off
        )));
    }

    let width = S::DTYPE_BYTES as usize;
    let mut take = |shape: Vec<usize>| -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = bytes[off..off + n * width]
            .chunks_exact(width)
            .map(S::read_le)
            .collect();
        off += n * width;
        Tensor::param(shape, data)
    };

    let d = cfg.embed_dim;
    let token_embedding = take(vec![cfg.vocab_size, d])?;
    let position_embedding = take(vec![cfg.context_length, d])?;
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for _ in 0..cfg.num_blocks {
        blocks.push(BlockParams {
            w_q: take(vec![d, d])?,
            w_k: take(vec![d, d])?,
            w_v: take(vec![d, d])?,
            w_o: take(vec![d, d])?,
            w_ff1: take(vec![d, cfg.ff_dim()])?,
            w_ff2: take(vec![cfg.ff_dim(), d])?,
        });
    }
    Ok(ModelParams {
        config: cfg,
        token_embedding,
        position_embedding,
        blocks,
    })
}
