//! Core data model and numerics for an image-based virtual try-on pipeline:
//! dataset layout and loading, clothing-agnostic person representations,
//! synchronized random-resized-crop augmentation, thin-plate-spline warping,
//! and streaming Frechet-distance statistics.
//!
//! Geometry and statistics are generic over the scalar type through [`Real`];
//! the pipeline uses the [`Scalar`] alias (f32) for image data and
//! [`HighPrecision`] (f64) for accumulated statistics and positional math.

pub mod agnostic;
pub mod crop;
pub mod dataset;
pub mod fid;
pub mod linalg;
pub mod palette;
pub mod pose;
pub mod raster;
pub mod toyset;
pub mod tps;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar abstraction: everything the geometry and statistics
/// code needs from a number type, satisfied by `f32` and `f64`.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Copy + 'static {
    /// Lossless embedding into `f64` (both supported types have one).
    fn to_f64_lossless(self) -> f64;
    /// Conversion from `f64`, rounding to the nearest representable value.
    fn from_f64_approx(v: f64) -> Self;
}

impl Real for f32 {
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    fn from_f64_approx(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn to_f64_lossless(self) -> f64 {
        self
    }
    fn from_f64_approx(v: f64) -> Self {
        v
    }
}

/// Scalar used for image data and network tensors.
pub type Scalar = f32;
/// Scalar used for positional math and accumulated statistics.
pub type HighPrecision = f64;

/// Image raster in the pipeline scalar type.
pub type Image = raster::Raster<Scalar>;

/// Deterministic seed derivation: mixes a base seed with stream labels
/// (sample index, epoch, stage) so every randomized step of a run is
/// reproducible and independent streams stay decorrelated.
///
/// Uses splitmix64 finalization rounds; stable across platforms and releases,
/// unlike `std::hash`.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut state = mix(base ^ 0x9e3779b97f4a7c15);
    for (i, &label) in labels.iter().enumerate() {
        state = mix(state ^ label.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
    }
    state
}
