//! Float abstraction so the same model code runs in f32 (training) and f64
//! (gradient checking).

use num_traits::{Float, NumCast};

/// Scalar type the model and optimizer are generic over.
pub trait Real:
    Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64; panics only on values unrepresentable even
    /// approximately (never happens for finite inputs).
    #[inline]
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> Real conversion")
    }

    /// Widening conversion to f64.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real -> f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
