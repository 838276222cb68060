//! Central finite-difference oracles for validating reverse-mode gradients.
//!
//! The numeric checks here run in `f64`; the differencing never goes through
//! the backward pass, so agreement between the two routes is meaningful.

use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central-difference gradient of `f()` w.r.t. every element of `t`.
/// `f` must recompute the scalar from current tensor contents on every call.
pub fn fd_grad<S: Scalar, F>(t: &Tensor<S>, h: S, mut f: F) -> Vec<S>
where
    F: FnMut() -> S,
{
    let n = t.numel();
    let two_h = h + h;
    let mut g = vec![S::zero(); n];
    for i in 0..n {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + h;
        let fp = f();
        t.data_mut()[i] = orig - h;
        let fm = f();
        t.data_mut()[i] = orig;
        g[i] = (fp - fm) / two_h;
    }
    g
}

/// Worst relative disagreement between two gradients.
/// Entries where both magnitudes fall below `floor` are compared absolutely
/// against `floor` (finite differencing is pure noise there).
pub fn max_rel_err<S: Scalar>(ad: &[S], fd: &[S], floor: S) -> f64 {
    assert_eq!(ad.len(), fd.len());
    let mut worst = 0.0f64;
    for (&a, &f) in ad.iter().zip(fd.iter()) {
        let denom = a.abs().max(f.abs());
        let err = if denom < floor {
            (a - f).abs().to_f64()
        } else {
            ((a - f).abs() / denom).to_f64()
        };
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// One named gradient comparison.
#[derive(Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Below this magnitude central differences stop resolving 1e-4 relative
/// accuracy: with h = 1e-5 the subtraction roundoff alone is about
/// eps * |f| / h ~ 1e-10, so such entries are compared absolutely.
const FD_FLOOR: f64 = 1e-5;

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central differences for each listed input tensor.
pub fn compare_fd<F>(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    h: f64,
    tol: f64,
    build: F,
) -> Vec<CheckResult>
where
    F: Fn(&Tape<f64>) -> crate::error::Result<Tensor<f64>>,
{
    for (_, t) in inputs {
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss = build(&tape).expect("gradcheck forward failed");
    tape.backward(&loss).expect("gradcheck backward failed");
    let ads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, t)| t.grad_vec().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    inputs
        .iter()
        .zip(ads)
        .map(|((input_name, t), ad)| {
            let fd = fd_grad(t, h, || {
                let tape = Tape::new();
                build(&tape).expect("gradcheck forward failed").item()
            });
            CheckResult {
                name: format!("{name}.{input_name}"),
                max_rel_err: max_rel_err(&ad, &fd, FD_FLOOR),
                tolerance: tol,
            }
        })
        .collect()
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Finite-difference validation of every primitive op on randomized small
/// inputs (h = 1e-5, tolerance 1e-4, all in f64).
pub fn check_primitives(seed: u64) -> Vec<CheckResult> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: Vec<usize>| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::param(shape, data).unwrap()
    };
    let h = 1e-5;
    let tol = 1e-4;
    let mut out = Vec::new();

    // weighted sums turn each op output into a scalar with non-trivial
    // upstream gradients
    {
        let a = rand_t(vec![3, 4]);
        let b = rand_t(vec![4, 2]);
        let w = rand_t(vec![3, 2]);
        let inputs = named(vec![("a", a.clone()), ("b", b.clone())]);
        out.extend(compare_fd("matmul", &inputs, h, tol, |tape| {
            let c = tape.matmul(&a, &b)?;
            let p = tape.mul(&c, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let a = rand_t(vec![3, 4]);
        let b = rand_t(vec![2, 4]);
        let w = rand_t(vec![3, 2]);
        let inputs = named(vec![("a", a.clone()), ("b", b.clone())]);
        out.extend(compare_fd("matmul_tb", &inputs, h, tol, |tape| {
            let c = tape.matmul_tb(&a, &b)?;
            let p = tape.mul(&c, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let a = rand_t(vec![2, 5]);
        let b = rand_t(vec![2, 5]);
        let w = rand_t(vec![2, 5]);
        let inputs = named(vec![("a", a.clone()), ("b", b.clone())]);
        out.extend(compare_fd("add", &inputs, h, tol, |tape| {
            let c = tape.add(&a, &b)?;
            let p = tape.mul(&c, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let a = rand_t(vec![6]);
        let b = rand_t(vec![6]);
        let inputs = named(vec![("a", a.clone()), ("b", b.clone())]);
        out.extend(compare_fd("mul", &inputs, h, tol, |tape| {
            let c = tape.mul(&a, &b)?;
            Ok(tape.sum(&c))
        }));
    }
    {
        let a = rand_t(vec![7]);
        let inputs = named(vec![("a", a.clone())]);
        out.extend(compare_fd("scale", &inputs, h, tol, |tape| {
            let c = tape.scale(&a, -1.7);
            Ok(tape.sum(&c))
        }));
    }
    {
        let x = rand_t(vec![3, 6]);
        let w = rand_t(vec![3, 6]);
        let inputs = named(vec![("x", x.clone())]);
        out.extend(compare_fd("layer_norm", &inputs, h, tol, |tape| {
            let y = tape.layer_norm(&x, 1e-5)?;
            let p = tape.mul(&y, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let x = rand_t(vec![3, 5]);
        let w = rand_t(vec![3, 5]);
        let inputs = named(vec![("x", x.clone())]);
        out.extend(compare_fd("softmax_rows", &inputs, h, tol, |tape| {
            let y = tape.softmax_rows(&x)?;
            let p = tape.mul(&y, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let x = rand_t(vec![9]);
        let w = rand_t(vec![9]);
        let inputs = named(vec![("x", x.clone())]);
        out.extend(compare_fd("gelu", &inputs, h, tol, |tape| {
            let y = tape.gelu(&x);
            let p = tape.mul(&y, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let table = rand_t(vec![5, 3]);
        let w = rand_t(vec![4, 3]);
        let ids = [0u32, 2, 4, 2];
        let inputs = named(vec![("table", table.clone())]);
        out.extend(compare_fd("embedding", &inputs, h, tol, |tape| {
            let y = tape.embedding(&table, &ids)?;
            let p = tape.mul(&y, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        // two sequences of length 4, dim 6, 2 heads
        let x = rand_t(vec![8, 6]);
        let wq = rand_t(vec![6, 6]);
        let wk = rand_t(vec![6, 6]);
        let wv = rand_t(vec![6, 6]);
        let wo = rand_t(vec![6, 6]);
        let w = rand_t(vec![8, 6]);
        let inputs = named(vec![
            ("x", x.clone()),
            ("wq", wq.clone()),
            ("wk", wk.clone()),
            ("wv", wv.clone()),
            ("wo", wo.clone()),
        ]);
        out.extend(compare_fd("attention", &inputs, h, tol, |tape| {
            let y = tape.causal_self_attention(&x, &wq, &wk, &wv, &wo, 2, 4)?;
            let p = tape.mul(&y, &w)?;
            Ok(tape.sum(&p))
        }));
    }
    {
        let logits = rand_t(vec![4, 6]);
        let targets = [1u32, 5, 0, 3];
        let inputs = named(vec![("logits", logits.clone())]);
        out.extend(compare_fd("cross_entropy", &inputs, h, tol, |tape| {
            tape.cross_entropy(&logits, &targets)
        }));
    }
    out
}

/// Finite-difference validation of the full model loss gradient, every
/// parameter element, on a width-8 two-block model in f64
/// (h = 1e-5, tolerance 1e-4).
pub fn check_model(seed: u64) -> Vec<CheckResult> {
    let cfg = crate::model::ModelConfig {
        vocab_size: 16,
        context_length: 8,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        ff_multiplier: 4,
        layer_norm_eps: 1e-5,
    };
    let params = crate::model::ModelParams::<f64>::init(&cfg, seed).unwrap();
    let tokens: Vec<u32> = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let targets: Vec<u32> = vec![1, 4, 1, 5, 9, 2, 6, 5];
    compare_fd("model", &params.named_tensors(), 1e-5, 1e-4, |tape| {
        params.loss(tape, &tokens, &targets, 8)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn fd_matches_ad_on_sum_of_squares() {
        let x = Tensor::param(vec![3], vec![0.5f64, -1.5, 2.0]).unwrap();
        let tape = Tape::new();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        let ad = x.grad_vec().unwrap();

        let fd = fd_grad(&x, 1e-6, || {
            let t = Tape::new();
            let sq = t.mul(&x, &x).unwrap();
            t.sum(&sq).item()
        });
        assert!(max_rel_err(&ad, &fd, 1e-8) < 1e-8);
    }

    #[test]
    fn matmul_grad_example() {
        // d sum(A ⋅ B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]]
        let a = Tensor::param(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::param(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&c);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![3.0, 4.0]);

        let fd = fd_grad(&a, 1e-6, || {
            let t = Tape::new();
            let c = t.matmul(&a, &b).unwrap();
            t.sum(&c).item()
        });
        assert!(max_rel_err(&[3.0, 4.0], &fd, 1e-8) < 1e-8);
    }

    #[test]
    fn layer_norm_grad_tight_tolerance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::param(
            vec![4],
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            vec![4],
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let results = compare_fd(
            "layer_norm4",
            &[("x".to_string(), x.clone())],
            1e-6,
            1e-6,
            |tape| {
                let y = tape.layer_norm(&x, 1e-5)?;
                let p = tape.mul(&y, &w)?;
                Ok(tape.sum(&p))
            },
        );
        for r in results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn all_primitives_match_finite_differences() {
        for r in check_primitives(7) {
            assert!(
                r.passed(),
                "{}: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }

    #[test]
    fn full_model_matches_finite_differences() {
        for r in check_model(13) {
            assert!(
                r.passed(),
                "{}: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }
}
