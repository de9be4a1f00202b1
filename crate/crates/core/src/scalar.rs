//! Floating point abstraction shared by the reward, GRPO and policy code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numeric modules are generic over.
///
/// Implemented for `f32` and `f64`. Constants coming from configuration
/// files are stored as `f64` and converted with [`Scalar::lit`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Copy + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable in scalar type")
    }

    /// Converts a count into this scalar type.
    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("count representable in scalar type")
    }

    /// Lossless widening to `f64` for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Mean of a slice, `None` when empty.
pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().copied().sum::<T>() / T::of_usize(values.len()))
}

/// Population standard deviation, `None` when empty.
pub fn population_std<T: Scalar>(values: &[T]) -> Option<T> {
    let m = mean(values)?;
    let var = values.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(values.len());
    Some(var.sqrt())
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_of_two_points() {
        assert_eq!(population_std(&[0.0f64, 2.0]), Some(1.0));
        assert_eq!(population_std::<f64>(&[]), None);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0f64, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let w = [0.0f32, 0.0, 0.0];
        assert!((log_sum_exp(&w) - 3f32.ln()).abs() < 1e-6);
    }
}
