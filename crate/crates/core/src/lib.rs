//! Scene flow between pairs of OCT volumes.
//!
//! Each volume is reduced to a depth map by an axial arg-max projection.
//! Lateral flow is estimated coarse to fine on census-transformed depth
//! maps; the depth component is estimated afterwards on the laterally
//! aligned maps. Stage estimators are either classical or small trained
//! convolutional networks, and everything is generic over `f32`/`f64`.

pub mod autodiff;
pub mod census;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod field;
pub mod loss;
pub mod projection;
pub mod pyramid;
pub mod scalar;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DepthMapF32 = field::DepthMap<f32>;
pub type DepthMapF64 = field::DepthMap<f64>;
pub type FlowFieldF32 = field::FlowField<f32>;
pub type FlowFieldF64 = field::FlowField<f64>;
pub type VolumeF32 = field::Volume<f32>;
pub type VolumeF64 = field::Volume<f64>;
pub type PipelineModelF32 = estimator::PipelineModel<f32>;
pub type PipelineModelF64 = estimator::PipelineModel<f64>;
pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;

/// SplitMix64 finalizer.
pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds seed components into one RNG stream seed, so streams are
/// independent of the order in which they are drawn.
pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix(acc ^ splitmix(p)))
}
