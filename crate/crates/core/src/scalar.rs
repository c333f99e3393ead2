use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Tensor element type. `f64` is the default precision (gradient checks are
/// only meaningful there); `f32` is selectable per run for training speed.
pub trait Scalar:
    Float + NumAssign + Debug + Display + Copy + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}
