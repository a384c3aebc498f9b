//! Scalar abstraction shared by the geometric and dynamical layers.

use nalgebra as na;
use num_traits as nt;

/// Floating-point scalar usable with `nalgebra`: `f32` or `f64`.
///
/// Everything that feeds a tolerance below `1e-6` is instantiated at `f64`;
/// the `f32` instantiation exists for memory-bound consumers.
pub trait Real:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + Default + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        na::convert(x)
    }

    fn as_f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
