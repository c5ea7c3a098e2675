//! Scalar abstraction over `f32`/`f64`.
//!
//! Model state is stored in `f32`. The gradient checker re-evaluates the same
//! computation graphs in `f64` so that central differences are not drowned in
//! single-precision rounding noise, so every op is written against this trait.
//!
//! Conversions are named `as_f64`/`as_f32` rather than `to_*` to stay clear
//! of the fallible `ToPrimitive` methods that `Float` already brings into
//! scope.

use num_traits::Float;

pub trait Real: Float + Copy + Default + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}
