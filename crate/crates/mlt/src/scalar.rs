//! Floating-point substrate. Training runs in `f32`; gradient checking runs
//! the same code paths in `f64`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Element type for tensors and parameters.
///
/// `exp_fast`/`tanh_fast` are the kernels' transcendentals: a polynomial
/// approximation for `f32` (max relative error ~2e-7, well below every
/// tolerance in the test suite) and the libm functions for `f64`, so the
/// 64-bit gradient-check mode keeps full accuracy.
pub trait Scalar:
    Float
    + FloatConst
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    /// Byte width, used as the dtype tag in checkpoint headers.
    const DTYPE_BYTES: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;

    /// Distance in representable values between `self` and `other`
    /// (0 = bitwise equal, 1 = adjacent floats, ...).
    fn ulp_distance(self, other: Self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// General matrix multiply `C = alpha * A ⋅ B + beta * C` with explicit
    /// row/column strides (row-major callers pass `(cols, 1)`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

#[inline]
fn check_bounds(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    debug_assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
    let max = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(max < len, "gemm operand out of bounds: {max} >= {len}");
}

impl Scalar for f32 {
    const DTYPE_BYTES: u32 = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        // 1 - 2/(e^{2x}+1); saturates cleanly at both ends.
        1.0 - 2.0 / (exp_f32(2.0 * self) + 1.0)
    }

    #[inline]
    fn ulp_distance(self, other: Self) -> u64 {
        if self == other {
            return 0;
        }
        let ord = |x: u32| -> u32 {
            if x >> 31 == 1 {
                !x
            } else {
                x | (1 << 31)
            }
        };
        ord(self.to_bits()).abs_diff(ord(other.to_bits())) as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_bounds(m, k, rsa, csa, a.len());
        check_bounds(k, n, rsb, csb, b.len());
        check_bounds(m, n, rsc, csc, c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE_BYTES: u32 = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn ulp_distance(self, other: Self) -> u64 {
        if self == other {
            return 0;
        }
        let ord = |x: u64| -> u64 {
            if x >> 63 == 1 {
                !x
            } else {
                x | (1 << 63)
            }
        };
        ord(self.to_bits()).abs_diff(ord(other.to_bits()))
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_bounds(m, k, rsa, csa, a.len());
        check_bounds(k, n, rsb, csb, b.len());
        check_bounds(m, n, rsc, csc, c.len());
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Cephes-style expf: `2^k * p(r)` with `x = k*ln2 + r`. The argument
/// saturates into [-87, 88] so the exponent bit trick stays valid; NaN
/// passes through so divergence stays visible to loss and gradient checks.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    if x.is_nan() {
        return x;
    }
    let x = x.min(88.0).max(-87.0);
    let k = (x * LOG2E).round();
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5.000_000_2e-1;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(((k as i32 + 127) << 23) as u32);
    y * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_f32_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -86.0f32;
        while x < 80.0 {
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.0173;
        }
        assert!(worst < 5e-7, "worst rel err {worst}");
    }

    #[test]
    fn tanh_f32_saturates() {
        assert_eq!(100.0f32.tanh_fast(), 1.0);
        assert_eq!((-100.0f32).tanh_fast(), -1.0);
        let r = 0.3f32.tanh_fast();
        assert!((r - 0.3f32.tanh()).abs() < 1e-6);
    }

    #[test]
    fn ulp_distance_basics() {
        assert_eq!(1.0f64.ulp_distance(1.0), 0);
        assert_eq!(1.0f64.ulp_distance(1.0 + f64::EPSILON), 1);
        let a = 0.1f32;
        let b = f32::from_bits(a.to_bits() + 1);
        assert_eq!(a.ulp_distance(b), 1);
        assert_eq!((-0.0f64).ulp_distance(0.0), 0);
        assert!((-1.0f32).ulp_distance(1.0) > 1 << 24);
    }

    #[test]
    fn gemm_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transposed-B via strides: A * B^T
        let mut c2 = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 1, 2, 0.0, &mut c2, 2, 1);
        assert_eq!(c2, [17.0, 23.0, 39.0, 53.0]);
    }
}
