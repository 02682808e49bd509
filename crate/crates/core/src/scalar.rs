//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of tensors, scores and losses.
///
/// Training runs in `f64`; `f32` exists so the underflow behavior of raw
/// probability products can be shown in both precisions.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;

    /// Converts an `f64` literal into this precision (rounding as `as` would).
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Smallest positive (subnormal) value representable.
    fn min_positive_subnormal() -> Self;

    /// `C ← A·B + beta·C` for strided `A` (m×k), `B` (k×n), `C` (m×n).
    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Strided read-only matrix view: `(data, row stride, column stride)`.
pub type MatRef<'a, T> = (&'a [T], usize, usize);
/// Strided mutable matrix view: `(data, row stride, column stride)`.
pub type MatMut<'a, T> = (&'a mut [T], usize, usize);

/// Largest flat index touched by an `rows × cols` view with the given strides.
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! checked_gemm {
    ($f:path, $m:expr, $k:expr, $n:expr, $a:expr, $b:expr, $beta:expr, $c:expr) => {{
        let (m, k, n) = ($m, $k, $n);
        let (a, rsa, csa) = $a;
        let (b, rsb, csb) = $b;
        let (c, rsc, csc) = $c;
        assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
        assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
        assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every index the kernel touches lies within the extents asserted above.
        unsafe {
            $f(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                $beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            )
        }
    }};
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn min_positive_subnormal() -> Self {
        f32::from_bits(1)
    }

    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
        checked_gemm!(matrixmultiply::sgemm, m, k, n, a, b, beta, c)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn min_positive_subnormal() -> Self {
        f64::from_bits(1)
    }

    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
        checked_gemm!(matrixmultiply::dgemm, m, k, n, a, b, beta, c)
    }
}

/// Numerically stable logistic function, kept strictly inside (0, 1): the
/// exact value rounds to 0 or 1 once |x| exceeds about 37 (f64) or 17 (f32).
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(top)
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_centered() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
        for &x in &[0.3, 2.0, 15.0, 700.0] {
            let s = sigmoid(x) + sigmoid(-x);
            assert!((s - 1.0f64).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn sigmoid_never_reaches_the_endpoints() {
        for &x in &[-1e4, -800.0, -40.0, 40.0, 800.0, 1e4] {
            let (a, b) = (sigmoid(x), sigmoid(x as f32));
            assert!(a > 0.0 && a < 1.0, "x={x}");
            assert!(b > 0.0 && b < 1.0, "x={x}");
        }
    }

    #[test]
    fn subnormal_floor() {
        assert!(f64::min_positive_subnormal() > 0.0);
        assert_eq!(f64::min_positive_subnormal() / 2.0, 0.0);
        assert_eq!(f32::min_positive_subnormal() / 2.0, 0.0);
    }
}
