//! Zero-shot and generalized zero-shot recognition over precomputed feature
//! maps.
//!
//! * [`setnet`] learns `K` diverse spatial attention maps per feature map and
//!   projects each attended feature into the semantic space.
//! * [`id3m`] detects unseen-class inputs from the disagreement between
//!   detectors each trained with one fold of seen classes held out.
//! * [`pipeline`] routes test inputs through the detector to the matching
//!   classifier.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix it to `f64`, which training and the checked tolerances assume.

pub mod dataio;
pub mod diffmath;
mod error;
pub mod eval;
pub mod id3m;
pub mod metrics;
pub mod pipeline;
mod scalar;
pub mod setnet;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffmath::Tensor<f64>;
pub type Tensor32 = diffmath::Tensor<f32>;
pub type GradientSet64 = diffmath::GradientSet<f64>;
pub type FeatureMap64 = setnet::FeatureMap<f64>;
pub type FeatureMap32 = setnet::FeatureMap<f32>;
pub type SemanticTable64 = setnet::SemanticTable<f64>;
pub type SetNet64 = setnet::SetNetModel<f64>;
pub type SetNet32 = setnet::SetNetModel<f32>;
pub type SubDdm64 = id3m::SubDdm<f64>;
pub type DdmEnsemble64 = id3m::DdmEnsemble<f64>;
pub type GzslSystem64 = pipeline::GzslSystem<f64>;
