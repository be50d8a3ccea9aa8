//! Floating-point abstraction shared by every numerical routine in the crate.
//!
//! All solvers and estimators are written against [`Scalar`] so they can run
//! in `f64` (the default, used by the CLI) or `f32` (useful for quick sweeps
//! where 1e-6 relative accuracy is enough).

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + LowerExp + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Smallest tolerance that is meaningful for this precision.
    fn default_tolerance() -> Self {
        let floor = Self::epsilon() * Self::lit(64.0);
        floor.max(Self::lit(1e-12))
    }

    /// Floor used when dividing by a field value in relative residuals.
    fn residual_floor() -> Self {
        Self::lit(1e-300).max(Self::min_positive_value())
    }

    /// Mantissa level below which the log-scaled field is renormalised.
    fn rescale_low() -> Self {
        Self::max_value().sqrt().recip()
    }

    /// Largest mantissa allowed after renormalisation.
    fn rescale_cap() -> Self {
        Self::max_value().powf(Self::lit(0.8))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `1 - e^{-1}`, the per-site lower-bound constant.
pub fn one_minus_inv_e<F: Scalar>() -> F {
    F::one() - F::one().neg().exp()
}

/// `ln(sum_i exp(x_i))` computed without overflow; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<F: Scalar>(values: impl IntoIterator<Item = F> + Clone) -> F {
    let max = values
        .clone()
        .into_iter()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == F::neg_infinity() {
        return max;
    }
    let s: F = values.into_iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.1f64, -2.0, 3.5];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp::<f64>(Vec::new()), f64::NEG_INFINITY);
        // far below the exp underflow threshold
        let tiny = [-2000.0f64, -2000.0];
        assert!((log_sum_exp(tiny) - (-2000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn tolerance_defaults() {
        assert_eq!(f64::default_tolerance(), 1e-12);
        assert!(f32::default_tolerance() > 1e-6);
        assert!(f32::residual_floor() > 0.0);
        assert!(f64::rescale_low() < 1e-150 && f64::rescale_low() > 1e-160);
    }
}
