//! Floating-point scalar abstraction shared by the kernel, model and training code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or statistic.
    fn of(x: f64) -> Self;

    fn of_usize(n: usize) -> Self;

    fn f64(self) -> f64;

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }

    /// `C ← α·A·B + β·C` for strided `m×k` `A`, `k×n` `B` and `m×n` `C`.
    ///
    /// # Safety
    /// Every index `i·rs + j·cs` inside the stated shapes must be in bounds of
    /// the corresponding pointer, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `e^x` for `x` in `[-708, 709]` (inputs outside are clamped), within a
/// few ulp of libm. Branch-free so loops over slices vectorize.
#[inline(always)]
pub fn exp_f64(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 709.0);
    let kf = x * std::f64::consts::LOG2_E + SHIFT;
    let k = kf.to_bits() as i64 - SHIFT.to_bits() as i64;
    let kf = kf - SHIFT;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to degree 13; |r| ≤ ln2/2 keeps the remainder below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

#[inline(always)]
fn exp<T: Scalar>(x: T) -> T {
    T::of(exp_f64(x.f64()))
}

#[inline(always)]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let e = exp(-x.abs());
    let s = T::one() / (T::one() + e);
    if x >= T::zero() {
        s
    } else {
        e * s
    }
}

/// `log(1 + e^x)`, evaluated without overflow for large `x`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else if x < T::of(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv<T: Scalar>(y: T) -> T {
    if y > T::of(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` via a rational approximation near zero and `exp` elsewhere, which
/// is markedly cheaper than the libm routine at comparable accuracy. Both
/// branches are evaluated and one is selected, so it vectorizes.
#[inline(always)]
pub fn tanh<T: Scalar>(x: T) -> T {
    let a = x.abs();
    // odd rational minimax form on |x| < 0.625
    let z = x * x;
    let p = (T::of(-9.643_991_794_250_523e-1) * z + T::of(-9.928_772_310_019_186e1)) * z
        + T::of(-1.614_687_684_417_084_5e3);
    let q = ((z + T::of(1.128_116_784_916_324e2)) * z + T::of(2.235_488_390_601_004_5e3)) * z
        + T::of(4.844_063_053_251_255e3);
    let near = x + x * z * p / q;
    let far = T::one() - T::two() / (exp(T::two() * a) + T::one());
    let far = if x < T::zero() { -far } else { far };
    if a < T::of(0.625) {
        near
    } else {
        far
    }
}

/// GELU, tanh form.
#[inline(always)]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::half() * x * (T::one() + tanh(u))
}

#[inline(always)]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let x2 = x * x;
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x2 * x);
    let th = tanh(u);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x2);
    T::half() * (T::one() + th) + T::half() * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn tanh_matches_libm() {
        let mut worst = 0.0f64;
        for i in -40_000..=40_000 {
            let x = i as f64 * 6e-4;
            let (a, b) = (tanh(x), x.tanh());
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
            assert_eq!(a.signum(), b.signum());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
        assert!((tanh(0.3f32) - 0.3f32.tanh()).abs() < 1e-7);
    }

    #[test]
    fn exp_matches_libm() {
        let mut worst = 0.0f64;
        for i in -70_800..70_900 {
            let x = i as f64 * 0.01 + 0.003;
            let (a, b) = (exp_f64(x), x.exp());
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(exp_f64(0.0), 1.0);
        assert!(exp_f64(-1e4) >= 0.0 && exp_f64(-1e4) < 1e-307);
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-4, 0.05, 0.5, 2.0, 7.5, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "y={y}");
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.15;
            let fd = central(gelu::<f64>, x);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_in_both_tails() {
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(-800.0f64) < 1e-300);
        for i in -300..=300 {
            let x = i as f64 * 0.1;
            let want = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - want).abs() <= 1e-15 * want, "x={x}");
        }
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
