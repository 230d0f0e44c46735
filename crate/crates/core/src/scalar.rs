//! Scalar abstraction the whole crate is generic over.

use num_traits::{Float, FloatConst, NumAssignOps};

/// Floating point scalar usable everywhere in the crate.
///
/// Implemented for `f32` and `f64` through the blanket impl below; anything
/// satisfying the bounds works. Conversions to and from `f64` are total for
/// the types we care about, so the helpers panic rather than return options.
pub trait Scalar:
    Float + FloatConst + NumAssignOps + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 value representable in scalar type")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar convertible to f64")
    }

    fn from_usize_(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl<T> Scalar for T where
    T: Float + FloatConst + NumAssignOps + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
}
