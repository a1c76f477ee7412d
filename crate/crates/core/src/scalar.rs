use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the controller is generic over: f32 or f64.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + Debug + Display + LowerExp
{
    /// Converts a literal. Every `Real` can represent an f64 approximately.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
