//! Slice-level compute kernels shared by forward ops and their backward rules.
//!
//! Parallel kernels split work into fixed-size chunks (never by thread count),
//! and every output element is produced by exactly one chunk with a fixed
//! inner summation order, so results are bitwise reproducible for a given
//! configuration regardless of how many worker threads execute the chunks.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Rows per parallel chunk for matrix work.
const GEMM_CHUNK: usize = 64;
/// Rows per parallel chunk for cheap row-wise ops.
const ROW_CHUNK: usize = 32;

/// `C = alpha * A ⋅ B + beta * C` with explicit strides, parallel over
/// row blocks of C when C is contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub fn par_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
    rsc: isize,
    csc: isize,
) {
    let contiguous = rsc == n as isize && csc == 1;
    if m >= 2 * GEMM_CHUNK && contiguous && c.len() >= m * n {
        c[..m * n]
            .par_chunks_mut(GEMM_CHUNK * n)
            .enumerate()
            .for_each(|(ci, cc)| {
                let rows = cc.len() / n;
                let a_off = ci * GEMM_CHUNK * rsa as usize;
                S::gemm(
                    rows,
                    k,
                    n,
                    alpha,
                    &a[a_off..],
                    rsa,
                    csa,
                    b,
                    rsb,
                    csb,
                    beta,
                    cc,
                    rsc,
                    csc,
                );
            });
    } else {
        S::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Applies `f(row_index, row)` to each `cols`-wide row of `data` in parallel.
pub fn par_rows_mut<S: Scalar, F>(data: &mut [S], cols: usize, f: F)
where
    F: Fn(usize, &mut [S]) + Sync,
{
    data.par_chunks_mut(ROW_CHUNK * cols)
        .enumerate()
        .for_each(|(ci, chunk)| {
            for (r, row) in chunk.chunks_mut(cols).enumerate() {
                f(ci * ROW_CHUNK + r, row);
            }
        });
}

/// Exp-normalizes `v` in place with max subtraction.
pub fn softmax_inplace<S: Scalar>(v: &mut [S]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp_fast();
        sum += *x;
    }
    let inv = S::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Softmax Jacobian-vector product into `dx`:
/// `dx_j = p_j * (dy_j - Σ_i dy_i p_i)`, accumulated.
pub fn softmax_vjp_row<S: Scalar>(p: &[S], dy: &[S], dx: &mut [S]) {
    let mut dot = S::zero();
    for (d, q) in dy.iter().zip(p.iter()) {
        dot += *d * *q;
    }
    for ((x, d), q) in dx.iter_mut().zip(dy.iter()).zip(p.iter()) {
        *x += *q * (*d - dot);
    }
}

fn row_mean_var<S: Scalar>(x: &[S]) -> (S, S) {
    let n = S::from_f64(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

/// `(x - mean) / sqrt(var + eps)` per `cols`-wide row.
pub fn layer_norm_fwd<S: Scalar>(x: &[S], cols: usize, eps: S, out: &mut [S]) {
    out.copy_from_slice(x);
    par_rows_mut(out, cols, |_, row| {
        let (mean, var) = row_mean_var(row);
        let inv = S::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    });
}

/// Accumulates the layer-norm gradient into `dx`.
pub fn layer_norm_bwd<S: Scalar>(x: &[S], cols: usize, eps: S, dy: &[S], dx: &mut [S]) {
    dx.par_chunks_mut(ROW_CHUNK * cols)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let base = ci * ROW_CHUNK * cols;
            for (r, dxr) in chunk.chunks_mut(cols).enumerate() {
                let off = base + r * cols;
                let xr = &x[off..off + cols];
                let dyr = &dy[off..off + cols];
                let n = S::from_f64(cols as f64);
                let (mean, var) = row_mean_var(xr);
                let inv = S::one() / (var + eps).sqrt();
                let mut dy_mean = S::zero();
                let mut dyy_mean = S::zero();
                for i in 0..cols {
                    let y = (xr[i] - mean) * inv;
                    dy_mean += dyr[i];
                    dyy_mean += dyr[i] * y;
                }
                dy_mean /= n;
                dyy_mean /= n;
                for i in 0..cols {
                    let y = (xr[i] - mean) * inv;
                    dxr[i] += inv * (dyr[i] - dy_mean - y * dyy_mean);
                }
            }
        });
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_fwd<S: Scalar>(x: &[S], out: &mut [S]) {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    out.par_chunks_mut(1 << 14)
        .zip(x.par_chunks(1 << 14))
        .for_each(|(oc, xc)| {
            for (o, &v) in oc.iter_mut().zip(xc.iter()) {
                let u = c * (v + a * v * v * v);
                *o = half * v * (S::one() + u.tanh_fast());
            }
        });
}

/// Accumulates `gelu'(x) * dy` into `dx`.
pub fn gelu_bwd<S: Scalar>(x: &[S], dy: &[S], dx: &mut [S]) {
    let c = S::from_f64(GELU_C);
    let a3 = S::from_f64(3.0 * GELU_A);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    dx.par_chunks_mut(1 << 14)
        .enumerate()
        .for_each(|(ci, dc)| {
            let base = ci * (1 << 14);
            for (i, d) in dc.iter_mut().enumerate() {
                let v = x[base + i];
                let u = c * (v + a * v * v * v);
                let t = u.tanh_fast();
                let du = c * (S::one() + a3 * v * v);
                let g = half * (S::one() + t) + half * v * (S::one() - t * t) * du;
                *d += g * dy[base + i];
            }
        });
}

/// Mean over rows of `-log softmax(logits_row)[target]`.
/// `row_losses` receives the per-row terms (length = rows).
pub fn cross_entropy_fwd<S: Scalar>(
    logits: &[S],
    vocab: usize,
    targets: &[u32],
    row_losses: &mut [S],
) -> S {
    row_losses
        .par_chunks_mut(ROW_CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            for (r, out) in chunk.iter_mut().enumerate() {
                let row_idx = ci * ROW_CHUNK + r;
                let row = &logits[row_idx * vocab..(row_idx + 1) * vocab];
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::zero();
                for &v in row.iter() {
                    sum += (v - max).exp_fast();
                }
                let lse = max + sum.ln();
                *out = lse - row[targets[row_idx] as usize];
            }
        });
    let mut total = S::zero();
    for &l in row_losses.iter() {
        total += l;
    }
    total / S::from_f64(targets.len() as f64)
}

/// Accumulates `upstream/rows * (softmax(logits) - onehot(target))` into `dlogits`.
pub fn cross_entropy_bwd<S: Scalar>(logits: &[S], vocab: usize, targets: &[u32], upstream: S, dlogits: &mut [S]) {
    let scale = upstream / S::from_f64(targets.len() as f64);
    dlogits
        .par_chunks_mut(ROW_CHUNK * vocab)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let base_row = ci * ROW_CHUNK;
            for (r, drow) in chunk.chunks_mut(vocab).enumerate() {
                let row_idx = base_row + r;
                let row = &logits[row_idx * vocab..(row_idx + 1) * vocab];
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::zero();
                for &v in row.iter() {
                    sum += (v - max).exp_fast();
                }
                let inv = S::one() / sum;
                let t = targets[row_idx] as usize;
                for j in 0..vocab {
                    let p = (row[j] - max).exp_fast() * inv;
                    let delta = if j == t { S::one() } else { S::zero() };
                    drow[j] += scale * (p - delta);
                }
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let mut v = [0.0f64, 0.0];
        softmax_inplace(&mut v);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = [3.0f64; 4];
        let mut out = [0.0f64; 4];
        layer_norm_fwd(&x, 4, 1e-5, &mut out);
        for v in out {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        // gelu(0) = 0; gelu is ~x for large x, ~0 for very negative x
        let x = [0.0f64, 5.0, -5.0, 1.0];
        let mut out = [0.0f64; 4];
        gelu_fwd(&x, &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 5.0).abs() < 1e-4);
        assert!(out[2].abs() < 1e-4);
        assert!((out[3] - 0.841192).abs() < 1e-5);
    }
}
