//! Scalar abstraction over the matrix element type.
//!
//! Everything numeric in this crate (matrices, the tape, the model math) is
//! generic over [`Scalar`], which is implemented for `f32` and `f64`. The
//! training pipeline itself runs on `f64` via the aliases at the crate root;
//! gradient checks at the tolerances used here are not attainable in `f32`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for matrices and tapes.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into `Self`.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant must be representable")
    }

    /// Widens to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must be representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
