//! Floating point abstraction shared by the network and the trainer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the autoencoder is generic over.
///
/// Implemented for `f32` (interactive path) and `f64` (gradient checks,
/// offline studies). Checkpoints always store 64-bit values.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// SIMD vector used by the convolution kernels.
    type Lane: Lane<Self>;

    /// Lossy conversion from a 64-bit literal.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    type Lane = wide::f32x8;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    type Lane = wide::f64x4;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Fixed-width vector of scalars.
pub trait Lane<T>: Copy + Send + Sync {
    const WIDTH: usize;

    fn splat(v: T) -> Self;

    /// Reads the first `WIDTH` values of `src`.
    fn load(src: &[T]) -> Self;

    /// Writes into the first `WIDTH` values of `dst`.
    fn store(self, dst: &mut [T]);

    /// `self * a + b`, fused where the target supports it.
    fn mul_add(self, a: Self, b: Self) -> Self;

    fn sum(self) -> T;
}

macro_rules! impl_lane {
    ($lane:ty, $t:ty, $w:expr) => {
        impl Lane<$t> for $lane {
            const WIDTH: usize = $w;

            #[inline(always)]
            fn splat(v: $t) -> Self {
                <$lane>::splat(v)
            }

            #[inline(always)]
            fn load(src: &[$t]) -> Self {
                let a: [$t; $w] = src[..$w].try_into().expect("lane width");
                <$lane>::new(a)
            }

            #[inline(always)]
            fn store(self, dst: &mut [$t]) {
                dst[..$w].copy_from_slice(&self.to_array());
            }

            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$lane>::mul_add(self, a, b)
            }

            #[inline(always)]
            fn sum(self) -> $t {
                self.reduce_add()
            }
        }
    };
}

impl_lane!(wide::f32x8, f32, 8);
impl_lane!(wide::f64x4, f64, 4);
