//! Small numeric helpers shared across modules.
//!
//! `FloatExt` backfills the `f64` math intrinsics that live in `std` for
//! `no_std` builds via `libm`. Whenever std is in the crate graph (unit
//! tests, or builds whose dependencies link std) its inherent methods take
//! precedence and the trait goes unused, so behaviour matches either way.

/// `std`-style float math for `no_std` builds, backed by `libm`.
#[allow(dead_code)]
pub(crate) trait FloatExt {
    fn sqrt(self) -> f64;
    fn exp(self) -> f64;
    fn ln(self) -> f64;
    fn sin(self) -> f64;
    fn cos(self) -> f64;
    fn atan2(self, other: f64) -> f64;
    fn hypot(self, other: f64) -> f64;
    fn powf(self, n: f64) -> f64;
    fn floor(self) -> f64;
}

impl FloatExt for f64 {
    #[inline]
    fn sqrt(self) -> f64 {
        libm::sqrt(self)
    }
    #[inline]
    fn exp(self) -> f64 {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        libm::log(self)
    }
    #[inline]
    fn sin(self) -> f64 {
        libm::sin(self)
    }
    #[inline]
    fn cos(self) -> f64 {
        libm::cos(self)
    }
    #[inline]
    fn atan2(self, other: f64) -> f64 {
        libm::atan2(self, other)
    }
    #[inline]
    fn hypot(self, other: f64) -> f64 {
        libm::hypot(self, other)
    }
    #[inline]
    fn powf(self, n: f64) -> f64 {
        libm::pow(self, n)
    }
    #[inline]
    fn floor(self) -> f64 {
        libm::floor(self)
    }
}

/// Sign convention used by the analytic gradients of L1-style kinks: 0 at the
/// kink itself (matching the subgradient choice the tests flag around).
#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Median of a slice (average of the two central values for even lengths).
pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = alloc::vec::Vec::from(values);
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = v.len();
    if n % 2 == 1 {
        Some(v[n / 2])
    } else {
        Some(0.5 * (v[n / 2 - 1] + v[n / 2]))
    }
}
