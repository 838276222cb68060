//! Reverse-mode autodiff over a linear op tape.
//!
//! Forward methods on [`Tape`] compute eagerly, record the op with handles to
//! its operands, and return a fresh output tensor. [`Tape::backward`] resets
//! the gradients of every recorded output, seeds the loss with 1, and replays
//! the tape in reverse, accumulating vector-Jacobian products into the
//! gradients of tensors that require them. Leaf gradients are accumulated
//! across backward calls until explicitly zeroed, which is what gradient
//! accumulation over micro-batches relies on.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::attn::{attention_bwd, attention_fwd, AttnSaved};
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EW_CHUNK: usize = 1 << 14;

enum Op<S: Scalar> {
    Matmul {
        a: Tensor<S>,
        b: Tensor<S>,
        out: Tensor<S>,
    },
    /// `out = a ⋅ bᵀ`
    MatmulTB {
        a: Tensor<S>,
        b: Tensor<S>,
        out: Tensor<S>,
    },
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
        out: Tensor<S>,
    },
    Mul {
        a: Tensor<S>,
        b: Tensor<S>,
        out: Tensor<S>,
    },
    Scale {
        a: Tensor<S>,
        c: S,
        out: Tensor<S>,
    },
    Sum {
        a: Tensor<S>,
        out: Tensor<S>,
    },
    LayerNorm {
        x: Tensor<S>,
        eps: S,
        out: Tensor<S>,
    },
    SoftmaxRows {
        x: Tensor<S>,
        out: Tensor<S>,
    },
    Gelu {
        x: Tensor<S>,
        out: Tensor<S>,
    },
    Embedding {
        table: Tensor<S>,
        ids: Vec<u32>,
        out: Tensor<S>,
    },
    Attention {
        x: Tensor<S>,
        wq: Tensor<S>,
        wk: Tensor<S>,
        wv: Tensor<S>,
        wo: Tensor<S>,
        heads: usize,
        seq: usize,
        saved: AttnSaved<S>,
        out: Tensor<S>,
    },
    CrossEntropy {
        logits: Tensor<S>,
        targets: Vec<u32>,
        out: Tensor<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn for_each_input(&self, f: &mut impl FnMut(&Tensor<S>)) {
        match self {
            Op::Matmul { a, b, .. }
            | Op::MatmulTB { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Mul { a, b, .. } => {
                f(a);
                f(b);
            }
            Op::Scale { a, .. } | Op::Sum { a, .. } => f(a),
            Op::LayerNorm { x, .. } | Op::SoftmaxRows { x, .. } | Op::Gelu { x, .. } => f(x),
            Op::Embedding { table, .. } => f(table),
            Op::Attention {
                x, wq, wk, wv, wo, ..
            } => {
                f(x);
                f(wq);
                f(wk);
                f(wv);
                f(wo);
            }
            Op::CrossEntropy { logits, .. } => f(logits),
        }
    }

    fn out(&self) -> &Tensor<S> {
        match self {
            Op::Matmul { out, .. }
            | Op::MatmulTB { out, .. }
            | Op::Add { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Sum { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::Gelu { out, .. }
            | Op::Embedding { out, .. }
            | Op::Attention { out, .. }
            | Op::CrossEntropy { out, .. } => out,
        }
    }
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    ops: RefCell<Vec<Op<S>>>,
}

fn dims2<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: shape,
            rhs: vec![],
        });
    }
    Ok((shape[0], shape[1]))
}

/// `dst += src`, fixed-chunk parallel.
fn acc<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.par_chunks_mut(EW_CHUNK)
        .zip(src.par_chunks(EW_CHUNK))
        .for_each(|(d, s)| {
            for (x, y) in d.iter_mut().zip(s.iter()) {
                *x += *y;
            }
        });
}

/// `dst += c * src`.
fn axpy<S: Scalar>(dst: &mut [S], c: S, src: &[S]) {
    dst.par_chunks_mut(EW_CHUNK)
        .zip(src.par_chunks(EW_CHUNK))
        .for_each(|(d, s)| {
            for (x, y) in d.iter_mut().zip(s.iter()) {
                *x += c * *y;
            }
        });
}

/// `dst += a ∘ b` elementwise.
fn acc_mul<S: Scalar>(dst: &mut [S], a: &[S], b: &[S]) {
    dst.par_chunks_mut(EW_CHUNK)
        .enumerate()
        .for_each(|(ci, d)| {
            let base = ci * EW_CHUNK;
            for (i, x) in d.iter_mut().enumerate() {
                *x += a[base + i] * b[base + i];
            }
        });
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    fn push(&self, op: Op<S>) {
        self.ops.borrow_mut().push(op);
    }

    /// `a[m x k] ⋅ b[k x n]`.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, ka) = dims2(a, "matmul")?;
        let (kb, n) = dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = vec![S::zero(); m * n];
        kernels::par_gemm(
            m, ka, n,
            S::one(), &a.data(), ka as isize, 1,
            &b.data(), n as isize, 1,
            S::zero(), &mut data, n as isize, 1,
        );
        let out = Tensor::node(vec![m, n], data);
        self.push(Op::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// `a[m x k] ⋅ b[n x k]ᵀ`; used for the tied output projection.
    pub fn matmul_tb(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, ka) = dims2(a, "matmul_tb")?;
        let (n, kb) = dims2(b, "matmul_tb")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_tb",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = vec![S::zero(); m * n];
        kernels::par_gemm(
            m, ka, n,
            S::one(), &a.data(), ka as isize, 1,
            &b.data(), 1, kb as isize,
            S::zero(), &mut data, n as isize, 1,
        );
        let out = Tensor::node(vec![m, n], data);
        self.push(Op::MatmulTB {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = a.to_vec();
        acc(&mut data, &b.data());
        let out = Tensor::node(a.shape(), data);
        self.push(Op::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = vec![S::zero(); a.numel()];
        acc_mul(&mut data, &a.data(), &b.data());
        let out = Tensor::node(a.shape(), data);
        self.push(Op::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor<S>, c: S) -> Tensor<S> {
        let data: Vec<S> = a.data().iter().map(|&v| c * v).collect();
        let out = Tensor::node(a.shape(), data);
        self.push(Op::Scale {
            a: a.clone(),
            c,
            out: out.clone(),
        });
        out
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, a: &Tensor<S>) -> Tensor<S> {
        let mut total = S::zero();
        for &v in a.data().iter() {
            total += v;
        }
        let out = Tensor::node(vec![1], vec![total]);
        self.push(Op::Sum {
            a: a.clone(),
            out: out.clone(),
        });
        out
    }

    /// Normalizes each last-axis slice to zero mean, unit variance
    /// (no learned gain or bias).
    pub fn layer_norm(&self, x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        if eps <= S::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (_rows, cols) = x.rows_cols();
        let mut data = vec![S::zero(); x.numel()];
        kernels::layer_norm_fwd(&x.data(), cols, eps, &mut data);
        let out = Tensor::node(x.shape(), data);
        self.push(Op::LayerNorm {
            x: x.clone(),
            eps,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Exp-normalizes each last-axis slice (max-subtracted for stability).
    pub fn softmax_rows(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        {
            let data = x.data();
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "softmax_rows",
                    detail: format!("non-finite input at flat index {pos}"),
                });
            }
        }
        let (_rows, cols) = x.rows_cols();
        let mut data = x.to_vec();
        kernels::par_rows_mut(&mut data, cols, |_, row| kernels::softmax_inplace(row));
        let out = Tensor::node(x.shape(), data);
        self.push(Op::SoftmaxRows {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn gelu(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut data = vec![S::zero(); x.numel()];
        kernels::gelu_fwd(&x.data(), &mut data);
        let out = Tensor::node(x.shape(), data);
        self.push(Op::Gelu {
            x: x.clone(),
            out: out.clone(),
        });
        out
    }

    /// Gathers `table` rows by id.
    pub fn embedding(&self, table: &Tensor<S>, ids: &[u32]) -> Result<Tensor<S>> {
        let (vocab, dim) = dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad as usize,
                bound: vocab,
            });
        }
        let mut data = vec![S::zero(); ids.len() * dim];
        {
            let tdata = table.data();
            for (row, &id) in ids.iter().enumerate() {
                let src = &tdata[id as usize * dim..(id as usize + 1) * dim];
                data[row * dim..(row + 1) * dim].copy_from_slice(src);
            }
        }
        let out = Tensor::node(vec![ids.len(), dim], data);
        self.push(Op::Embedding {
            table: table.clone(),
            ids: ids.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Causal multi-head self-attention over `rows/seq` packed sequences.
    pub fn causal_self_attention(
        &self,
        x: &Tensor<S>,
        wq: &Tensor<S>,
        wk: &Tensor<S>,
        wv: &Tensor<S>,
        wo: &Tensor<S>,
        heads: usize,
        seq: usize,
    ) -> Result<Tensor<S>> {
        let (rows, dim) = dims2(x, "attention")?;
        for w in [wq, wk, wv, wo] {
            let (r, c) = dims2(w, "attention")?;
            if r != dim || c != dim {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: vec![dim, dim],
                    rhs: w.shape(),
                });
            }
        }
        if heads == 0 || dim % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::Config(format!(
                "attention: rows={rows} dim={dim} heads={heads} seq={seq} incompatible"
            )));
        }
        let (saved, out_data) = attention_fwd(
            &x.data(),
            &wq.data(),
            &wk.data(),
            &wv.data(),
            &wo.data(),
            rows,
            seq,
            dim,
            heads,
        );
        let out = Tensor::node(vec![rows, dim], out_data);
        self.push(Op::Attention {
            x: x.clone(),
            wq: wq.clone(),
            wk: wk.clone(),
            wv: wv.clone(),
            wo: wo.clone(),
            heads,
            seq,
            saved,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn cross_entropy(&self, logits: &Tensor<S>, targets: &[u32]) -> Result<Tensor<S>> {
        let (rows, vocab) = dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad as usize,
                bound: vocab,
            });
        }
        let mut row_losses = vec![S::zero(); rows];
        let loss = kernels::cross_entropy_fwd(&logits.data(), vocab, targets, &mut row_losses);
        let out = Tensor::node(vec![1], vec![loss]);
        self.push(Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Reverse pass from a scalar loss recorded on this tape.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let ops = self.ops.borrow();
        // Node gradients are owned by this pass. Leaf gradients accumulate
        // across passes, but each pass computes its own gradient in
        // isolation and folds it in with a single add per element, so k
        // accumulated passes hold exactly g1 + g2 + ... + gk.
        for op in ops.iter() {
            op.out().zero_grad();
        }
        let mut parked: Vec<(Tensor<S>, Vec<S>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for op in ops.iter() {
            op.for_each_input(&mut |t| {
                if seen.insert(t.storage_ptr()) {
                    if let Some(g) = t.take_grad() {
                        parked.push((t.clone(), g));
                    }
                }
            });
        }
        loss.seed_grad_one();
        for op in ops.iter().rev() {
            vjp(op);
        }
        for (t, g) in parked {
            t.fold_parked(g);
        }
        Ok(())
    }
}

fn vjp<S: Scalar>(op: &Op<S>) {
    let Some(g) = op.out().grad_ref() else {
        return;
    };
    let g: &[S] = &g;
    match op {
        Op::Matmul { a, b, out: _ } => {
            let (m, k) = a.rows_cols();
            let n = b.rows_cols().1;
            if a.requires_grad() {
                // dA += dC ⋅ Bᵀ
                kernels::par_gemm(
                    m, n, k,
                    S::one(), g, n as isize, 1,
                    &b.data(), 1, n as isize,
                    S::one(), &mut a.grad_mut(), k as isize, 1,
                );
            }
            if b.requires_grad() {
                // dB += Aᵀ ⋅ dC
                kernels::par_gemm(
                    k, m, n,
                    S::one(), &a.data(), 1, k as isize,
                    g, n as isize, 1,
                    S::one(), &mut b.grad_mut(), n as isize, 1,
                );
            }
        }
        Op::MatmulTB { a, b, out: _ } => {
            let (m, k) = a.rows_cols();
            let n = b.rows_cols().0;
            if a.requires_grad() {
                // dA += dC ⋅ B
                kernels::par_gemm(
                    m, n, k,
                    S::one(), g, n as isize, 1,
                    &b.data(), k as isize, 1,
                    S::one(), &mut a.grad_mut(), k as isize, 1,
                );
            }
            if b.requires_grad() {
                // dB += dCᵀ ⋅ A
                kernels::par_gemm(
                    n, m, k,
                    S::one(), g, 1, n as isize,
                    &a.data(), k as isize, 1,
                    S::one(), &mut b.grad_mut(), k as isize, 1,
                );
            }
        }
        Op::Add { a, b, out: _ } => {
            if a.requires_grad() {
                acc(&mut a.grad_mut(), g);
            }
            if b.requires_grad() {
                acc(&mut b.grad_mut(), g);
            }
        }
        Op::Mul { a, b, out: _ } => {
            if a.requires_grad() {
                acc_mul(&mut a.grad_mut(), g, &b.data());
            }
            if b.requires_grad() {
                acc_mul(&mut b.grad_mut(), g, &a.data());
            }
        }
        Op::Scale { a, c, out: _ } => {
            if a.requires_grad() {
                axpy(&mut a.grad_mut(), *c, g);
            }
        }
        Op::Sum { a, out: _ } => {
            if a.requires_grad() {
                let gs = g[0];
                let mut da = a.grad_mut();
                da.par_chunks_mut(EW_CHUNK).for_each(|chunk| {
                    for v in chunk.iter_mut() {
                        *v += gs;
                    }
                });
            }
        }
        Op::LayerNorm { x, eps, out: _ } => {
            if x.requires_grad() {
                let cols = x.rows_cols().1;
                kernels::layer_norm_bwd(&x.data(), cols, *eps, g, &mut x.grad_mut());
            }
        }
        Op::SoftmaxRows { x, out } => {
            if x.requires_grad() {
                let cols = x.rows_cols().1;
                let p_guard = out.data();
                let p: &[S] = &p_guard;
                let mut dx = x.grad_mut();
                dx.par_chunks_mut(cols).enumerate().for_each(|(r, dxr)| {
                    kernels::softmax_vjp_row(
                        &p[r * cols..(r + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                        dxr,
                    );
                });
            }
        }
        Op::Gelu { x, out: _ } => {
            if x.requires_grad() {
                kernels::gelu_bwd(&x.data(), g, &mut x.grad_mut());
            }
        }
        Op::Embedding { table, ids, out: _ } => {
            if table.requires_grad() {
                let dim = table.rows_cols().1;
                let mut dt = table.grad_mut();
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                    let src = &g[row * dim..(row + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += *s;
                    }
                }
            }
        }
        Op::Attention {
            x,
            wq,
            wk,
            wv,
            wo,
            heads,
            seq,
            saved,
            out: _,
        } => {
            // All five operands are parameters or nodes in practice;
            // gradients are accumulated unconditionally.
            let (rows, dim) = x.rows_cols();
            attention_bwd(
                &x.data(),
                &wq.data(),
                &wk.data(),
                &wv.data(),
                &wo.data(),
                saved,
                rows,
                *seq,
                dim,
                *heads,
                g,
                &mut x.grad_mut(),
                &mut wq.grad_mut(),
                &mut wk.grad_mut(),
                &mut wv.grad_mut(),
                &mut wo.grad_mut(),
            );
        }
        Op::CrossEntropy {
            logits,
            targets,
            out: _,
        } => {
            if logits.requires_grad() {
                let vocab = logits.rows_cols().1;
                kernels::cross_entropy_bwd(&logits.data(), vocab, targets, g[0], &mut logits.grad_mut());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = Tensor::from_vec(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(&i, &b).unwrap();
        assert_eq!(c.to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_forced_by_definition() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("shape mismatch"), "{msg}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum x^2, x = [1, 2] -> grad [2, 4]
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_with_zeroing_is_identical() {
        let tape = Tape::new();
        let x = Tensor::param(vec![3], vec![0.3f32, -1.2, 2.0]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        let g1 = x.grad_vec().unwrap();
        x.zero_grad();
        tape.backward(&loss).unwrap();
        let g2 = x.grad_vec().unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn softmax_rows_basics() {
        let tape = Tape::new();
        // symmetric
        let x = Tensor::from_vec(vec![2], vec![0.0f64, 0.0]).unwrap();
        let p = tape.softmax_rows(&x).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        // no overflow under max subtraction
        let y = Tensor::from_vec(vec![2], vec![1000.0f64, 1000.0]).unwrap();
        let p = tape.softmax_rows(&y).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        // direct evaluation: softmax([0, ln 3]) = [1/4, 3/4]
        let z = Tensor::from_vec(vec![2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let p = tape.softmax_rows(&z).unwrap();
        let v = p.to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            tape.softmax_rows(&x),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let c = Tensor::from_vec(vec![3], vec![4.2f64, 4.2, 4.2]).unwrap();
        let out = tape.layer_norm(&c, 1e-5).unwrap();
        for v in out.to_vec() {
            assert!(v.abs() < 1e-9);
        }
        let x = Tensor::from_vec(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let out = tape.layer_norm(&x, 1e-12).unwrap();
        let v = out.to_vec();
        assert!((v[0] + 1.2247).abs() < 1e-4);
        assert!(v[1].abs() < 1e-4);
        assert!((v[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        for vocab in [256usize, 50257] {
            let logits = Tensor::<f64>::zeros(vec![2, vocab]);
            let loss = tape.cross_entropy(&logits, &[0, 3]).unwrap();
            let expected = (vocab as f64).ln();
            assert!(
                (loss.item() - expected).abs() < 1e-9,
                "vocab {vocab}: {} vs {expected}",
                loss.item()
            );
        }
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![1, 3], vec![10.0f64, 0.0, 0.0]).unwrap();
        let loss = tape.cross_entropy(&logits, &[0]).unwrap();
        // -ln(e^10 / (e^10 + 2)) = ln(1 + 2 e^-10)
        let expected = (2.0 * (-10.0f64).exp()).ln_1p();
        assert!((loss.item() - expected).abs() < 1e-12);
        assert!((loss.item() - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let tape = Tape::new();
        let logits = Tensor::<f64>::zeros(vec![1, 4]);
        assert!(matches!(
            tape.cross_entropy(&logits, &[4]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let tape = Tape::new();
        let table = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(matches!(
            tape.embedding(&table, &[4]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn tied_table_receives_both_contributions() {
        // Use the same table as embedding and as projection: gradients sum.
        let tape = Tape::new();
        let table = Tensor::param(vec![2, 2], vec![0.1f64, 0.2, 0.3, 0.4]).unwrap();
        let x = tape.embedding(&table, &[0]).unwrap();
        let logits = tape.matmul_tb(&x, &table).unwrap();
        let loss = tape.cross_entropy(&logits, &[1]).unwrap();
        tape.backward(&loss).unwrap();
        let g = table.grad_vec().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
