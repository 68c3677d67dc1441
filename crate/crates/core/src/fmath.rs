//! Float functions missing from `core`, routed through `libm` so results
//! are bit-identical across platforms and with or without `std`.

use crate::Real;

/// Fused `a * b + c`, exactly rounded, so results match between the std
/// intrinsic and the libm fallback.
#[inline(always)]
pub(crate) fn fmadd(a: Real, b: Real, c: Real) -> Real {
    #[cfg(feature = "std")]
    {
        a.mul_add(b, c)
    }
    #[cfg(all(not(feature = "std"), not(feature = "single")))]
    {
        libm::fma(a, b, c)
    }
    #[cfg(all(not(feature = "std"), feature = "single"))]
    {
        libm::fmaf(a, b, c)
    }
}

#[inline]
pub(crate) fn sqrt(x: Real) -> Real {
    #[cfg(not(feature = "single"))]
    {
        libm::sqrt(x)
    }
    #[cfg(feature = "single")]
    {
        libm::sqrtf(x)
    }
}

/// `base^n` by binary exponentiation.
#[inline]
pub(crate) fn powi(base: Real, mut n: u64) -> Real {
    let mut acc: Real = 1.0;
    let mut b = base;
    while n > 0 {
        if n & 1 == 1 {
            acc *= b;
        }
        b *= b;
        n >>= 1;
    }
    acc
}
