//! Causal multi-head self-attention, forward and backward.
//!
//! Inputs are `rows x dim` activations holding `rows/seq` packed sequences;
//! attention never crosses sequence boundaries and position `t` attends to
//! positions `<= t` only. Probabilities are recomputed in the backward pass
//! from the saved projections, so only `q`, `k`, `v` and the pre-projection
//! context are kept alive by the tape.

use rayon::prelude::*;

use crate::kernels::{par_gemm, softmax_inplace};
use crate::scalar::Scalar;

pub struct AttnSaved<S> {
    pub q: Vec<S>,
    pub k: Vec<S>,
    pub v: Vec<S>,
    /// Per-head context, concatenated: the input of the output projection.
    pub concat: Vec<S>,
}

/// Masked softmax over the score matrix of one (sequence, head) pair:
/// row `i` is normalized over columns `0..=i`, the rest set to zero.
fn causal_softmax<S: Scalar>(scores: &mut [S], seq: usize) {
    for i in 0..seq {
        let row = &mut scores[i * seq..(i + 1) * seq];
        softmax_inplace(&mut row[..=i]);
        for z in row[i + 1..].iter_mut() {
            *z = S::zero();
        }
    }
}

/// Scaled causal scores for one (sequence, head) block: `scale * Q Kᵀ`,
/// then masked softmax. `base` addresses the block inside `q`/`k`.
fn head_probs<S: Scalar>(
    q: &[S],
    k: &[S],
    base: usize,
    seq: usize,
    dim: usize,
    head_dim: usize,
    scale: S,
    scores: &mut [S],
) {
    S::gemm(
        seq,
        head_dim,
        seq,
        scale,
        &q[base..],
        dim as isize,
        1,
        &k[base..],
        1,
        dim as isize,
        S::zero(),
        scores,
        seq as isize,
        1,
    );
    causal_softmax(scores, seq);
}

#[allow(clippy::too_many_arguments)]
pub fn attention_fwd<S: Scalar>(
    x: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    wo: &[S],
    rows: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (AttnSaved<S>, Vec<S>) {
    let head_dim = dim / heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let d = dim as isize;

    let mut q = vec![S::zero(); rows * dim];
    let mut k = vec![S::zero(); rows * dim];
    let mut v = vec![S::zero(); rows * dim];
    par_gemm(rows, dim, dim, S::one(), x, d, 1, wq, d, 1, S::zero(), &mut q, d, 1);
    par_gemm(rows, dim, dim, S::one(), x, d, 1, wk, d, 1, S::zero(), &mut k, d, 1);
    par_gemm(rows, dim, dim, S::one(), x, d, 1, wv, d, 1, S::zero(), &mut v, d, 1);

    let mut concat = vec![S::zero(); rows * dim];
    concat
        .par_chunks_mut(seq * dim)
        .enumerate()
        .for_each(|(b, ctx)| {
            let mut scores = vec![S::zero(); seq * seq];
            for h in 0..heads {
                let base = b * seq * dim + h * head_dim;
                head_probs(&q, &k, base, seq, dim, head_dim, scale, &mut scores);
                // ctx block for this head: rows of this sequence, head columns
                S::gemm(
                    seq,
                    seq,
                    head_dim,
                    S::one(),
                    &scores,
                    seq as isize,
                    1,
                    &v[base..],
                    d,
                    1,
                    S::zero(),
                    &mut ctx[h * head_dim..],
                    d,
                    1,
                );
            }
        });

    let mut out = vec![S::zero(); rows * dim];
    par_gemm(rows, dim, dim, S::one(), &concat, d, 1, wo, d, 1, S::zero(), &mut out, d, 1);
    (AttnSaved { q, k, v, concat }, out)
}

/// Accumulates gradients for input and the four projection matrices.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<S: Scalar>(
    x: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    wo: &[S],
    saved: &AttnSaved<S>,
    rows: usize,
    seq: usize,
    dim: usize,
    heads: usize,
    dout: &[S],
    dx: &mut [S],
    dwq: &mut [S],
    dwk: &mut [S],
    dwv: &mut [S],
    dwo: &mut [S],
) {
    let head_dim = dim / heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let d = dim as isize;
    let one = S::one();

    // dWo += concatᵀ · dout
    par_gemm(dim, rows, dim, one, &saved.concat, 1, d, dout, d, 1, one, dwo, d, 1);
    // dconcat = dout · Woᵀ
    let mut dconcat = vec![S::zero(); rows * dim];
    par_gemm(rows, dim, dim, one, dout, d, 1, wo, 1, d, S::zero(), &mut dconcat, d, 1);

    let mut dq = vec![S::zero(); rows * dim];
    let mut dk = vec![S::zero(); rows * dim];
    let mut dv = vec![S::zero(); rows * dim];
    dq.par_chunks_mut(seq * dim)
        .zip(dk.par_chunks_mut(seq * dim))
        .zip(dv.par_chunks_mut(seq * dim))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let mut probs = vec![S::zero(); seq * seq];
            let mut dscore = vec![S::zero(); seq * seq];
            for h in 0..heads {
                let base = b * seq * dim + h * head_dim;
                head_probs(&saved.q, &saved.k, base, seq, dim, head_dim, scale, &mut probs);

                // dP = dctx · Vᵀ for this block
                S::gemm(
                    seq,
                    head_dim,
                    seq,
                    one,
                    &dconcat[base..],
                    d,
                    1,
                    &saved.v[base..],
                    1,
                    d,
                    S::zero(),
                    &mut dscore,
                    seq as isize,
                    1,
                );
                // through the masked softmax, in place
                for i in 0..seq {
                    let p = &probs[i * seq..i * seq + i + 1];
                    let ds = &mut dscore[i * seq..(i + 1) * seq];
                    let mut dot = S::zero();
                    for j in 0..=i {
                        dot += ds[j] * p[j];
                    }
                    for j in 0..=i {
                        ds[j] = p[j] * (ds[j] - dot);
                    }
                    for z in ds[i + 1..].iter_mut() {
                        *z = S::zero();
                    }
                }

                let local = h * head_dim;
                // dQ = scale * dS · K ; dK = scale * dSᵀ · Q ; dV = Pᵀ · dctx
                S::gemm(
                    seq, seq, head_dim, scale,
                    &dscore, seq as isize, 1,
                    &saved.k[base..], d, 1,
                    S::zero(), &mut dqb[local..], d, 1,
                );
                S::gemm(
                    seq, seq, head_dim, scale,
                    &dscore, 1, seq as isize,
                    &saved.q[base..], d, 1,
                    S::zero(), &mut dkb[local..], d, 1,
                );
                S::gemm(
                    seq, seq, head_dim, one,
                    &probs, 1, seq as isize,
                    &dconcat[base..], d, 1,
                    S::zero(), &mut dvb[local..], d, 1,
                );
            }
        });

    // dx += dQ Wqᵀ + dK Wkᵀ + dV Wvᵀ
    par_gemm(rows, dim, dim, one, &dq, d, 1, wq, 1, d, one, dx, d, 1);
    par_gemm(rows, dim, dim, one, &dk, d, 1, wk, 1, d, one, dx, d, 1);
    par_gemm(rows, dim, dim, one, &dv, d, 1, wv, 1, d, one, dx, d, 1);
    // dW? += xᵀ · d?
    par_gemm(dim, rows, dim, one, x, 1, d, &dq, d, 1, one, dwq, d, 1);
    par_gemm(dim, rows, dim, one, x, 1, d, &dk, d, 1, one, dwk, d, 1);
    par_gemm(dim, rows, dim, one, x, 1, d, &dv, d, 1, one, dwv, d, 1);
}
